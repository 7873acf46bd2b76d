//! Function vectors, task vectors and the steering sweep.
//!
//! A function vector sums the mean last-token contributions of the attention
//! heads with the largest causal indirect effect. A task vector is the residual
//! stream of a few-shot donor prompt at one layer. Both are applied at the last
//! token of a zero-shot prompt as `h ← α·h + λ·v`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::metrics::EvalRecord;
use crate::model::{Intervention, PositionRule, TokenSequence, Transformer, Vocab};
use crate::seed;
use crate::tasks::{build_prompt, eval_prompts, pick_query, shuffle_labels, IclTask, LabeledPrompt, Template};

/// Exemplar count of the prompts behind head means and CIE.
pub const FV_SHOTS: usize = 10;
/// Exemplar count of task-vector donor prompts.
pub const TV_SHOTS: usize = 5;
/// Shot counts of the unsteered baselines recorded with every sweep.
pub const BASELINE_SHOTS: [usize; 3] = [0, 5, 10];
pub const PATCH_POSITION: &str = "last_token";
pub const CIE_METRIC: &str = "p_correct_diff";

/// Mean residual-stream contribution `ā[ℓ][j]` of every head at the last token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeanTable {
    pub task: String,
    pub n_prompts: usize,
    pub means: Vec<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CieTable {
    pub task: String,
    pub trials: usize,
    pub cie: Vec<Vec<f64>>,
}

impl CieTable {
    /// `layer,head,cie` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,cie\n");
        for (l, row) in self.cie.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out.push_str(&format!("{l},{j},{v}\n"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringKind {
    Fv,
    Tv,
}

impl SteeringKind {
    pub fn name(self) -> &'static str {
        match self {
            SteeringKind::Fv => "fv",
            SteeringKind::Tv => "tv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Fv { heads: Vec<(usize, usize)> },
    Tv { donor: String, layer: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub kind: SteeringKind,
    pub task: String,
    pub vector: Vec<f32>,
    pub provenance: Provenance,
}

fn last(tokens: &TokenSequence) -> usize {
    tokens.len() - 1
}

fn prob_of(logits: &[f32], id: u32) -> f64 {
    linalg::softmax64(logits)[id as usize]
}

/// Average head contributions over `n_prompts` K-shot prompts drawn from `pool`.
pub fn mean_head_activations(
    model: &Transformer,
    vocab: &Vocab,
    pool: &IclTask,
    n_prompts: usize,
    k: usize,
    seed: u64,
) -> Result<HeadMeanTable> {
    if n_prompts == 0 {
        return Err(Error::Steering("n_prompts must be at least 1".into()));
    }
    if pool.len() < k + 1 {
        return Err(Error::Steering(format!(
            "`{}` has {} pairs; {k}-shot prompts need {}",
            pool.name,
            pool.len(),
            k + 1
        )));
    }
    let c = model.config();
    let mut sums = vec![vec![vec![0.0f64; c.hidden_dim]; c.n_heads]; c.n_layers];
    for i in 0..n_prompts {
        let mut rng = seed::stream(seed, &format!("means/{i}"));
        let query = &pool.pairs[rand::Rng::random_range(&mut rng, 0..pool.len())];
        let prompt = build_prompt(pool, k, &query.x, Template::Arrow, seed::derive(seed, &format!("means/{i}/prompt")))?;
        let tokens = prompt.tokenize(vocab)?;
        let out = model.forward(&tokens, &[last(&tokens)])?;
        for (l, layer) in out.trace.layers.iter().enumerate() {
            for (j, head) in layer.heads[0].iter().enumerate() {
                for (s, &v) in sums[l][j].iter_mut().zip(head) {
                    *s += v as f64;
                }
            }
        }
    }
    let means = sums
        .into_iter()
        .map(|layer| {
            layer
                .into_iter()
                .map(|head| head.into_iter().map(|s| (s / n_prompts as f64) as f32).collect())
                .collect()
        })
        .collect();
    Ok(HeadMeanTable {
        task: pool.name.clone(),
        n_prompts,
        means,
    })
}

/// A label-corrupted K-shot prompt for CIE trial `trial`, with the query's correct answer.
pub fn corrupted_prompt(pool: &IclTask, k: usize, trial: usize, seed: u64) -> Result<LabeledPrompt> {
    let mut rng = seed::stream(seed, &format!("cie/{trial}"));
    let query = &pool.pairs[rand::Rng::random_range(&mut rng, 0..pool.len())];
    let clean = build_prompt(pool, k, &query.x, Template::Arrow, seed::derive(seed, &format!("cie/{trial}/prompt")))?;
    Ok(LabeledPrompt {
        spec: shuffle_labels(&clean, seed::derive(seed, &format!("cie/{trial}/shuffle")))?,
        answer: query.y.clone(),
    })
}

/// `p_patched(y) − p_corrupted(y)` for every head on one corrupted prompt.
pub fn cie_trial(model: &Transformer, vocab: &Vocab, prompt: &LabeledPrompt, means: &HeadMeanTable) -> Result<Vec<Vec<f64>>> {
    let c = model.config();
    let tokens = prompt.spec.tokenize(vocab)?;
    let y = vocab.require(&prompt.answer)?;
    let (out, cache) = model.forward_cached(&tokens, &[])?;
    let base = prob_of(out.last_logits(), y);
    (0..c.n_layers)
        .map(|l| {
            (0..c.n_heads)
                .map(|j| {
                    let iv = Intervention::replace_heads(l, PositionRule::LastToken, vec![(j, means.means[l][j].clone())]);
                    let patched = model.resume(&cache, l, &[iv], &[])?;
                    Ok(prob_of(patched.last_logits(), y) - base)
                })
                .collect()
        })
        .collect()
}

/// Mean causal indirect effect of every head over `trials` corrupted prompts.
pub fn compute_cie(
    model: &Transformer,
    vocab: &Vocab,
    pool: &IclTask,
    means: &HeadMeanTable,
    trials: usize,
    k: usize,
    seed: u64,
) -> Result<CieTable> {
    if trials == 0 {
        return Err(Error::Steering("trials must be at least 1".into()));
    }
    let c = model.config();
    let mut sums = vec![vec![0.0f64; c.n_heads]; c.n_layers];
    for t in 0..trials {
        let prompt = corrupted_prompt(pool, k, t, seed)?;
        for (row, deltas) in sums.iter_mut().zip(cie_trial(model, vocab, &prompt, means)?) {
            for (s, d) in row.iter_mut().zip(deltas) {
                *s += d;
            }
        }
    }
    Ok(CieTable {
        task: pool.name.clone(),
        trials,
        cie: sums
            .into_iter()
            .map(|row| row.into_iter().map(|s| s / trials as f64).collect())
            .collect(),
    })
}

/// Heads ordered by descending CIE, ties by `(layer, head)`.
pub fn rank_heads(cie: &CieTable) -> Vec<(usize, usize)> {
    let mut heads: Vec<(usize, usize)> = cie
        .cie
        .iter()
        .enumerate()
        .flat_map(|(l, row)| (0..row.len()).map(move |j| (l, j)))
        .collect();
    heads.sort_by(|&a, &b| cie.cie[b.0][b.1].total_cmp(&cie.cie[a.0][a.1]).then(a.cmp(&b)));
    heads
}

/// Sum of the mean contributions of the top-`n` heads.
pub fn build_fv(cie: &CieTable, means: &HeadMeanTable, n: usize) -> Result<SteeringVector> {
    let ranked = rank_heads(cie);
    if n == 0 || n > ranked.len() {
        return Err(Error::Steering(format!("n = {n} outside 1..={}", ranked.len())));
    }
    let heads: Vec<(usize, usize)> = ranked[..n].to_vec();
    let dim = means.means[0][0].len();
    let mut sum = vec![0.0f64; dim];
    for &(l, j) in &heads {
        for (s, &v) in sum.iter_mut().zip(&means.means[l][j]) {
            *s += v as f64;
        }
    }
    Ok(SteeringVector {
        kind: SteeringKind::Fv,
        task: cie.task.clone(),
        vector: sum.into_iter().map(|v| v as f32).collect(),
        provenance: Provenance::Fv { heads },
    })
}

/// The donor prompt behind a task vector: `k` exemplars and a query that is not among them.
pub fn tv_donor(pool: &IclTask, k: usize, seed: u64) -> Result<LabeledPrompt> {
    let mut rng = seed::stream(seed, "tv/query");
    let query = pick_query(pool, &[], &mut rng)
        .ok_or_else(|| Error::Steering(format!("`{}` has no pairs", pool.name)))?;
    let spec = build_prompt(pool, k, &query.x, Template::Arrow, seed::derive(seed, "tv/prompt"))?;
    Ok(LabeledPrompt {
        spec,
        answer: query.y.clone(),
    })
}

/// Block-`layer` output at the donor prompt's last token.
pub fn extract_tv(model: &Transformer, vocab: &Vocab, pool: &IclTask, k: usize, layer: usize, seed: u64) -> Result<SteeringVector> {
    if layer >= model.config().n_layers {
        return Err(Error::Steering(format!("layer {layer} out of range")));
    }
    let donor = tv_donor(pool, k, seed)?;
    let tokens = donor.spec.tokenize(vocab)?;
    let out = model.forward(&tokens, &[last(&tokens)])?;
    Ok(SteeringVector {
        kind: SteeringKind::Tv,
        task: pool.name.clone(),
        vector: out.trace.layers[layer].resid_out[0].clone(),
        provenance: Provenance::Tv {
            donor: donor.spec.render(),
            layer,
            k,
        },
    })
}

/// Greedy next-token accuracy on labeled prompts.
pub fn icl_accuracy(model: &Transformer, vocab: &Vocab, prompts: &[LabeledPrompt]) -> Result<f64> {
    evaluate_with(model, vocab, prompts, |_| Vec::new())
}

/// Accuracy with `h ← α·h + λ·v` applied at `(layer, last token)` of every prompt.
pub fn evaluate_steered(
    model: &Transformer,
    vocab: &Vocab,
    prompts: &[LabeledPrompt],
    vector: &[f32],
    layer: usize,
    lambda: f32,
    alpha: f32,
) -> Result<f64> {
    evaluate_with(model, vocab, prompts, |_| {
        vec![Intervention::residual(layer, PositionRule::LastToken, alpha, lambda, vector.to_vec())]
    })
}

fn evaluate_with<F>(model: &Transformer, vocab: &Vocab, prompts: &[LabeledPrompt], ivs: F) -> Result<f64>
where
    F: Fn(&LabeledPrompt) -> Vec<Intervention>,
{
    if prompts.is_empty() {
        return Err(Error::Steering("no evaluation prompts".into()));
    }
    let mut hits = 0;
    for p in prompts {
        let tokens = p.spec.tokenize(vocab)?;
        let out = model.forward_with_interventions(&tokens, &ivs(p), &[])?;
        if linalg::argmax(out.last_logits()) as u32 == vocab.require(&p.answer)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / prompts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub layers: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// FV only; clamped to the model's head count and deduplicated.
    pub head_counts: Vec<usize>,
}

impl SweepGrid {
    /// Every layer with the default λ and head-count grids.
    pub fn full(n_layers: usize) -> Self {
        SweepGrid {
            layers: (0..n_layers).collect(),
            lambdas: vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            head_counts: vec![2, 16, 32, 64, 128, 256, 512, 1024],
        }
    }

    pub fn clamped_head_counts(&self, total_heads: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.head_counts.iter().map(|&n| n.clamp(1, total_heads)).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Everything a sweep over one task needs.
pub struct SweepContext<'a> {
    pub model: &'a Transformer,
    pub vocab: &'a Vocab,
    pub model_id: &'a str,
    /// Exemplar and donor pool.
    pub train: &'a IclTask,
    /// Queries for evaluation.
    pub test: &'a IclTask,
    pub n_eval: usize,
    pub seed: u64,
}

pub enum SweepMethod<'a> {
    Fv {
        means: &'a HeadMeanTable,
        cie: &'a CieTable,
        alpha: f32,
    },
    Tv {
        alpha: f32,
    },
}

impl SweepContext<'_> {
    pub fn prompts(&self, k: usize) -> Result<Vec<LabeledPrompt>> {
        eval_prompts(self.train, self.test, k, self.n_eval, seed::derive(self.seed, "eval"))
    }

    fn record(&self, method: &str, layer: Option<usize>, lambda: Option<f64>, n_heads: Option<usize>, k_shot: usize, accuracy: f64) -> EvalRecord {
        EvalRecord {
            model_id: self.model_id.to_string(),
            task: self.train.name.clone(),
            method: method.to_string(),
            layer,
            lambda,
            n_heads,
            k_shot,
            accuracy,
            seed: self.seed,
        }
    }

    /// Unsteered accuracy at K = 0, 5, 10.
    pub fn baselines(&self) -> Result<Vec<EvalRecord>> {
        BASELINE_SHOTS
            .iter()
            .map(|&k| Ok(self.record("icl", None, None, None, k, icl_accuracy(self.model, self.vocab, &self.prompts(k)?)?)))
            .collect()
    }
}

/// Baseline records followed by one record per grid cell, ordered by `(layer, λ, n)`.
pub fn run_sweep(ctx: &SweepContext<'_>, grid: &SweepGrid, method: &SweepMethod<'_>) -> Result<Vec<EvalRecord>> {
    let n_layers = ctx.model.config().n_layers;
    if grid.layers.is_empty() || grid.lambdas.is_empty() {
        return Err(Error::Steering("empty sweep grid".into()));
    }
    if let Some(&l) = grid.layers.iter().find(|&&l| l >= n_layers) {
        return Err(Error::Steering(format!("grid layer {l} out of range")));
    }
    let mut layers = grid.layers.clone();
    layers.sort_unstable();
    layers.dedup();
    let mut lambdas = grid.lambdas.clone();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();

    let zero_shot = ctx.prompts(0)?;
    let mut records = ctx.baselines()?;
    match method {
        SweepMethod::Fv { means, cie, alpha } => {
            let counts = grid.clamped_head_counts(ctx.model.config().total_heads());
            if counts.is_empty() {
                return Err(Error::Steering("empty head-count grid".into()));
            }
            let fvs = counts
                .iter()
                .map(|&n| build_fv(cie, means, n))
                .collect::<Result<Vec<_>>>()?;
            for &l in &layers {
                for &lambda in &lambdas {
                    for (fv, &n) in fvs.iter().zip(&counts) {
                        let acc = evaluate_steered(ctx.model, ctx.vocab, &zero_shot, &fv.vector, l, lambda as f32, *alpha)?;
                        records.push(ctx.record("fv", Some(l), Some(lambda), Some(n), 0, acc));
                    }
                }
            }
        }
        SweepMethod::Tv { alpha } => {
            for &l in &layers {
                let tv = extract_tv(ctx.model, ctx.vocab, ctx.train, TV_SHOTS, l, seed::derive(ctx.seed, "tv"))?;
                for &lambda in &lambdas {
                    let acc = evaluate_steered(ctx.model, ctx.vocab, &zero_shot, &tv.vector, l, lambda as f32, *alpha)?;
                    records.push(ctx.record("tv", Some(l), Some(lambda), None, 0, acc));
                }
            }
        }
    }
    Ok(records)
}
