//! The reference experiment: four synthetic tasks over one shared input
//! vocabulary and configs for every command.

use std::path::{Path, PathBuf};

use steerlab::tasks::synthetic_tasks;

use crate::error::{CliError, Result};

pub const TASK_NAMES: [&str; 4] = ["t0", "t1", "t2", "t3"];
/// Tasks reported by the sweeps; the others only shape training.
pub const EVALUATED: [&str; 2] = ["t0", "t1"];
pub const N_INPUTS: usize = 50;

const TASKS: &str = r#"tasks = ["tasks/t0.tsv", "tasks/t1.tsv", "tasks/t2.tsv", "tasks/t3.tsv"]"#;

const TRAIN: &str = r#"version = 1
method = "fv"
seeds = [0]
output_dir = "model"

[model.train]
n_layers = 4
n_heads = 4
head_size = 32
mlp_size = 256
context_len = 43
steps = 2000
batch_size = 32
learning_rate = 0.001
adam_betas = [0.9, 0.98]
k_min = 0
k_max = 10
warmup_steps = 200
grad_clip = 1.0
task_weight = 1.0
bijection_weight = 0.5
"#;

const SWEEP: &str = r#"version = 1
method = "{method}"
seeds = [0, 1]
output_dir = "runs/{method}"
evaluate = ["t0", "t1"]

[model]
dir = "model"

[split]
test_size = 10

[sweep]
lambdas = [1.0, 2.0, 4.0]
head_counts = [2, 4, 8, 16]
default_head_counts = [2, 16]
n_eval = 50
mean_prompts = 50
cie_trials = 20
"#;

const DOLA: &str = r#"version = 1
method = "dola"
seeds = [0]
output_dir = "runs/dola"

[model]
dir = "model"

[dola]
synthetic = { task = "t0", n_items = 40 }
"#;

const PROFILE: &str = r#"version = 1
method = "{method}"
seeds = [0]
output_dir = "runs/{method}"
evaluate = ["t0", "t1"]

[model]
dir = "model"

[profile]
k_shots = [0, 5]
n_prompts = 5
"#;

const REPORT: &str = r#"version = 1
method = "fv"
output_dir = "runs/report"
tasks = []

[model]

[report]
runs = ["runs/fv", "runs/tv"]
"#;

/// Config file names written by [`write_reference`], in the order they should run.
pub const CONFIGS: [&str; 7] = ["train.toml", "fv.toml", "tv.toml", "dola.toml", "logitlens.toml", "apathy.toml", "report.toml"];

/// Write task TSVs and configs under `dir`; returns the config paths in run order.
pub fn write_reference(dir: &Path) -> Result<Vec<PathBuf>> {
    let tasks_dir = dir.join("tasks");
    std::fs::create_dir_all(&tasks_dir).map_err(|e| CliError::io(&tasks_dir, e))?;
    for task in synthetic_tasks(&TASK_NAMES, N_INPUTS, 0)? {
        let body: String = task.pairs.iter().map(|p| format!("{}\t{}\n", p.x, p.y)).collect();
        let path = tasks_dir.join(format!("{}.tsv", task.name));
        std::fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
    }
    let with_tasks = |body: &str| {
        let (head, tail) = body.split_once("\n\n").expect("config has sections");
        format!("{head}\n{TASKS}\n\n{tail}")
    };
    let files = [
        ("train.toml", with_tasks(TRAIN)),
        ("fv.toml", with_tasks(&SWEEP.replace("{method}", "fv"))),
        ("tv.toml", with_tasks(&SWEEP.replace("{method}", "tv"))),
        ("dola.toml", with_tasks(DOLA)),
        ("logitlens.toml", with_tasks(&PROFILE.replace("{method}", "logitlens"))),
        ("apathy.toml", with_tasks(&PROFILE.replace("{method}", "apathy"))),
        ("report.toml", REPORT.to_string()),
    ];
    files
        .iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    #[test]
    fn reference_configs_parse() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_reference(dir.path()).unwrap();
        assert_eq!(paths.len(), CONFIGS.len());
        for p in &paths {
            let text = std::fs::read_to_string(p).unwrap();
            let cfg = ExperimentConfig::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            if p.ends_with("train.toml") {
                assert!(cfg.model.train.is_some());
                assert_eq!(cfg.tasks.len(), 4);
            }
        }
        let t0 = std::fs::read_to_string(dir.path().join("tasks/t0.tsv")).unwrap();
        assert_eq!(t0.lines().count(), N_INPUTS);
    }
}
