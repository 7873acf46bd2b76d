//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use steerlab::dola::{BucketRegime, VheadReference};
use steerlab::logitlens::LensMode;
use steerlab::model::{Activation, ModelConfig, PositionalScheme};
use steerlab::training::{EpisodeMix, EpisodeSource, TrainSpec};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dola,
    Fv,
    Tv,
    Logitlens,
    Apathy,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dola => "dola",
            Method::Fv => "fv",
            Method::Tv => "tv",
            Method::Logitlens => "logitlens",
            Method::Apathy => "apathy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub method: Method,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub model: ModelSource,
    pub tasks: Vec<PathBuf>,
    /// Task names evaluated by `sweep` and `profile`; all tasks when absent.
    #[serde(default)]
    pub evaluate: Option<Vec<String>>,
    #[serde(default)]
    pub split: SplitBlock,
    #[serde(default)]
    pub sweep: SweepBlock,
    #[serde(default)]
    pub dola: DolaBlock,
    #[serde(default)]
    pub profile: ProfileBlock,
    #[serde(default)]
    pub report: ReportBlock,
}

/// A trained model directory, or a recipe for training one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<TrainBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_size: usize,
    pub mlp_size: usize,
    pub context_len: usize,
    #[serde(default = "default_positional")]
    pub positional: PositionalScheme,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    #[serde(default = "default_betas")]
    pub adam_betas: [f32; 2],
    pub k_min: usize,
    pub k_max: usize,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub grad_clip: Option<f32>,
    /// Mixture weight of each fixed task.
    #[serde(default = "one")]
    pub task_weight: f64,
    #[serde(default)]
    pub bijection_weight: f64,
}

impl TrainBlock {
    pub fn spec(&self, task_names: &[String], vocab_size: usize, seed: u64) -> Result<TrainSpec> {
        let mut model = ModelConfig::new(
            self.n_layers,
            self.n_heads,
            self.head_size,
            self.mlp_size,
            vocab_size,
            self.context_len,
        );
        model.positional = self.positional;
        model.activation = self.activation;
        let mut entries: Vec<(EpisodeSource, f64)> = task_names
            .iter()
            .map(|n| (EpisodeSource::FixedTask(n.clone()), self.task_weight))
            .collect();
        if self.bijection_weight > 0.0 {
            entries.push((EpisodeSource::RandomBijection, self.bijection_weight));
        }
        let spec = TrainSpec {
            model,
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_betas: (self.adam_betas[0], self.adam_betas[1]),
            seed,
            episode_mix: EpisodeMix::new(entries).map_err(config_err)?,
            k_min: self.k_min,
            k_max: self.k_max,
            warmup_steps: self.warmup_steps,
            grad_clip: self.grad_clip,
        };
        spec.validate().map_err(config_err)?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitBlock {
    /// Held-out queries per task.
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

impl Default for SplitBlock {
    fn default() -> Self {
        SplitBlock {
            test_size: default_test_size(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    /// Every layer when absent.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_head_counts")]
    pub head_counts: Vec<usize>,
    /// Head counts of the default-parameter FV rows.
    #[serde(default = "default_fv_heads")]
    pub default_head_counts: Vec<usize>,
    #[serde(default = "one")]
    pub default_lambda: f64,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default = "default_mean_prompts")]
    pub mean_prompts: usize,
    #[serde(default = "default_cie_trials")]
    pub cie_trials: usize,
    #[serde(default = "one")]
    pub fv_alpha: f64,
    #[serde(default)]
    pub tv_alpha: f64,
}

impl Default for SweepBlock {
    fn default() -> Self {
        SweepBlock {
            layers: None,
            lambdas: default_lambdas(),
            head_counts: default_head_counts(),
            default_head_counts: default_fv_heads(),
            default_lambda: 1.0,
            n_eval: default_n_eval(),
            mean_prompts: default_mean_prompts(),
            cie_trials: default_cie_trials(),
            fv_alpha: 1.0,
            tv_alpha: 0.0,
        }
    }
}

/// Parameters of a generated multiple-choice set built from one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticMc {
    pub task: String,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DolaBlock {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticMc>,
    #[serde(default = "default_regime")]
    pub regime: BucketRegime,
    #[serde(default = "default_stage1_alpha")]
    pub stage1_alpha: f64,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub vhead_reference: VheadReference,
    /// Constant of the `baseline_shift` scoring mode.
    #[serde(default = "default_shift")]
    pub shift_c: f64,
    #[serde(default)]
    pub lens: LensMode,
}

impl Default for DolaBlock {
    fn default() -> Self {
        DolaBlock {
            dataset: None,
            synthetic: None,
            regime: default_regime(),
            stage1_alpha: default_stage1_alpha(),
            alphas: default_alphas(),
            vhead_reference: VheadReference::default(),
            shift_c: default_shift(),
            lens: LensMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileBlock {
    #[serde(default = "default_profile_shots")]
    pub k_shots: Vec<usize>,
    /// Prompts per (task, K).
    #[serde(default = "default_profile_prompts")]
    pub n_prompts: usize,
    #[serde(default)]
    pub lens: LensMode,
}

impl Default for ProfileBlock {
    fn default() -> Self {
        ProfileBlock {
            k_shots: default_profile_shots(),
            n_prompts: default_profile_prompts(),
            lens: LensMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ReportBlock {
    /// Sweep output directories to aggregate.
    #[serde(default)]
    pub runs: Vec<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_positional() -> PositionalScheme {
    PositionalScheme::Rotary { theta: 10_000.0 }
}
fn default_activation() -> Activation {
    Activation::Gelu
}
fn default_betas() -> [f32; 2] {
    [0.9, 0.999]
}
fn one() -> f64 {
    1.0
}
fn default_test_size() -> usize {
    50
}
fn default_lambdas() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]
}
fn default_head_counts() -> Vec<usize> {
    vec![2, 16, 32, 64, 128, 256, 512, 1024]
}
fn default_fv_heads() -> Vec<usize> {
    vec![2, 16]
}
fn default_n_eval() -> usize {
    50
}
fn default_mean_prompts() -> usize {
    100
}
fn default_cie_trials() -> usize {
    25
}
fn default_regime() -> BucketRegime {
    BucketRegime::Small
}
fn default_stage1_alpha() -> f64 {
    0.1
}
fn default_alphas() -> Vec<f64> {
    vec![0.0, 0.1, 0.25, 0.5, 0.75, 0.9]
}
fn default_shift() -> f64 {
    20.0
}
fn default_profile_shots() -> Vec<usize> {
    vec![0, 5]
}
fn default_profile_prompts() -> usize {
    5
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parse, resolve relative paths against the file's directory, apply
    /// overrides and validate.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        if let Some(seed) = overrides.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &overrides.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(config_err)?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {}; expected {CONFIG_VERSION}",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        self.tasks.iter_mut().for_each(fix);
        if let Some(d) = self.model.dir.as_mut() {
            fix(d);
        }
        if let Some(d) = self.dola.dataset.as_mut() {
            fix(d);
        }
        self.report.runs.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        for p in &self.tasks {
            if !p.is_file() {
                return Err(CliError::Config(format!("task file {} does not exist", p.display())));
            }
        }
        if let Some(d) = &self.model.dir {
            for f in [crate::io::WEIGHTS_FILE, crate::io::MODEL_FILE, crate::io::VOCAB_FILE] {
                if !d.join(f).is_file() {
                    return Err(CliError::Config(format!("model directory {} lacks {f}", d.display())));
                }
            }
        }
        if let Some(p) = &self.dola.dataset {
            if !p.is_file() {
                return Err(CliError::Config(format!("dataset {} does not exist", p.display())));
            }
        }
        for r in &self.report.runs {
            if !r.is_dir() {
                return Err(CliError::Config(format!("run directory {} does not exist", r.display())));
            }
        }
        let s = &self.sweep;
        if s.lambdas.is_empty() || s.n_eval == 0 || s.mean_prompts == 0 || s.cie_trials == 0 {
            return Err(CliError::Config("sweep grid and sample counts must be nonempty".into()));
        }
        if !s.lambdas.contains(&s.default_lambda) {
            return Err(CliError::Config(format!(
                "sweep.lambdas must contain the default λ = {}",
                s.default_lambda
            )));
        }
        let d = &self.dola;
        if d.alphas.is_empty() || d.alphas.iter().chain([&d.stage1_alpha]).any(|a| !(0.0..=1.0).contains(a)) {
            return Err(CliError::Config("dola alphas must be nonempty and lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of the config, without
    /// `output_dir`. Key order in the source file does not matter.
    pub fn hash(&self, command: &str) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(map) = &mut value {
            map.remove("output_dir");
            map.insert("command".into(), command.into());
        }
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// The tasks selected for evaluation, by name, in config order.
    pub fn evaluated<'a>(&self, tasks: &'a [steerlab::tasks::IclTask]) -> Result<Vec<&'a steerlab::tasks::IclTask>> {
        match &self.evaluate {
            None => Ok(tasks.iter().collect()),
            Some(names) => names
                .iter()
                .map(|n| {
                    tasks
                        .iter()
                        .find(|t| &t.name == n)
                        .ok_or_else(|| CliError::Config(format!("evaluated task `{n}` is not among the loaded tasks")))
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
method = "tv"
output_dir = "out"
tasks = []

[model]
dir = "m"
"#;

    #[test]
    fn defaults_match_the_standard_grids() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.dola.alphas, vec![0.0, 0.1, 0.25, 0.5, 0.75, 0.9]);
        assert_eq!(cfg.dola.stage1_alpha, 0.1);
        assert_eq!(cfg.sweep.default_lambda, 1.0);
        assert_eq!(cfg.sweep.default_head_counts, vec![2, 16]);
        assert_eq!(cfg.sweep.fv_alpha, 1.0);
        assert_eq!(cfg.sweep.tv_alpha, 0.0);
        assert_eq!(cfg.seeds, vec![0]);
    }

    #[test]
    fn hash_ignores_key_order_and_output_dir() {
        let reordered = r#"
tasks = []
output_dir = "elsewhere"
method = "tv"

[model]
dir = "m"

[sweep]
n_eval = 50
lambdas = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]

[dola]
shift_c = 20.0
alphas = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9]
"#;
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let b = ExperimentConfig::parse(&format!("version = 1\n{reordered}")).unwrap();
        assert_eq!(a.hash("sweep"), b.hash("sweep"));
        assert_ne!(a.hash("sweep"), a.hash("dola"));
        let mut c = a.clone();
        c.seeds = vec![1];
        assert_ne!(a.hash("sweep"), c.hash("sweep"));
    }

    #[test]
    fn rejects_wrong_version_and_unknown_keys() {
        assert!(matches!(
            ExperimentConfig::parse(&MINIMAL.replace("version = 1", "version = 2")),
            Err(CliError::Config(_))
        ));
        assert!(matches!(ExperimentConfig::parse(&format!("{MINIMAL}\nbogus = 3")), Err(CliError::Config(_))));
    }

    #[test]
    fn missing_task_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, MINIMAL.replace("tasks = []", "tasks = [\"nope.tsv\"]").replace("dir = \"m\"", "")).unwrap();
        let err = ExperimentConfig::load(&path, &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn train_block_builds_a_valid_spec() {
        let block = TrainBlock {
            n_layers: 2,
            n_heads: 2,
            head_size: 4,
            mlp_size: 16,
            context_len: 43,
            positional: default_positional(),
            activation: default_activation(),
            steps: 10,
            batch_size: 2,
            learning_rate: 1e-3,
            adam_betas: default_betas(),
            k_min: 0,
            k_max: 10,
            warmup_steps: 0,
            grad_clip: None,
            task_weight: 1.0,
            bijection_weight: 0.5,
        };
        let spec = block.spec(&["a".into(), "b".into()], 30, 0).unwrap();
        assert_eq!(spec.episode_mix.entries.len(), 3);
        assert_eq!(spec.model.vocab_size, 30);
        let mut bad = block.clone();
        bad.k_max = 20;
        assert!(matches!(bad.spec(&["a".into()], 30, 0), Err(CliError::Config(_))));
    }
}
