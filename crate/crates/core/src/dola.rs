//! Contrastive decoding by contrasting layers.
//!
//! At every position the final distribution `q_L` is contrasted with a premature
//! lens distribution `q_P`, chosen per position as the bucket layer farthest
//! from `q_L` in Jensen-Shannon divergence:
//!
//! ```text
//! F(x) = log q_L(x) − log q_P(x)   for x in V_head, −∞ otherwise
//! p̂    = softmax(F)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::logitlens::{logit_lens, LensMode};
use crate::model::{TokenSequence, Transformer, Vocab, ARROW};

/// Value of `F` for a token inside `V_head` that has zero probability in either distribution.
pub const CLAMP_FLOOR: f64 = -1e9;

const NORMALIZATION_TOLERANCE: f64 = 1e-6;

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Distribution("entries must be finite and nonnegative".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::Distribution(format!("entries sum to {total}")));
    }
    Ok(())
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Distribution(format!("lengths {} and {} differ", p.len(), q.len())));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl_to_mixture(p, &m) + 0.5 * kl_to_mixture(q, &m)).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketRegime {
    Small,
    Large,
}

/// Candidate premature layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBucket {
    pub name: String,
    pub layers: Vec<usize>,
}

impl LayerBucket {
    pub fn new(name: impl Into<String>, layers: Vec<usize>, n_layers: usize) -> Result<Self> {
        let name = name.into();
        if layers.is_empty() {
            return Err(Error::Bucket(format!("bucket `{name}` is empty")));
        }
        if let Some(&l) = layers.iter().find(|&&l| l + 1 >= n_layers) {
            return Err(Error::Bucket(format!(
                "bucket `{name}` contains layer {l}; candidates must precede the final layer {}",
                n_layers - 1
            )));
        }
        Ok(LayerBucket { name, layers })
    }
}

impl BucketRegime {
    /// Percentage ranges of the four buckets.
    pub fn ranges(self) -> [(usize, usize); 4] {
        match self {
            BucketRegime::Small => [(0, 50), (25, 75), (50, 100), (0, 100)],
            BucketRegime::Large => [(0, 25), (25, 50), (50, 75), (75, 100)],
        }
    }
}

/// Even layers in `[⌊lo·L/100⌋, ⌈hi·L/100⌉)`, excluding the final layer.
pub fn make_buckets(n_layers: usize, regime: BucketRegime) -> Result<Vec<LayerBucket>> {
    if n_layers < 4 {
        return Err(Error::Bucket(format!("need at least 4 layers, got {n_layers}")));
    }
    regime
        .ranges()
        .iter()
        .map(|&(lo, hi)| {
            let start = lo * n_layers / 100;
            let end = (hi * n_layers).div_ceil(100);
            let layers = (start..end).filter(|l| l % 2 == 0 && l + 1 < n_layers).collect();
            LayerBucket::new(format!("{lo}-{hi}%"), layers, n_layers)
        })
        .collect()
}

/// The bucket layer whose distribution is farthest from `q_final`; ties go to the lowest layer.
pub fn select_premature(q_by_layer: &[Vec<f64>], q_final: &[f64], bucket: &LayerBucket) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    let mut layers = bucket.layers.clone();
    layers.sort_unstable();
    for l in layers {
        let q = q_by_layer
            .get(l)
            .ok_or_else(|| Error::Bucket(format!("layer {l} missing from the distribution stack")))?;
        let d = jsd(q_final, q)?;
        if best.is_none_or(|(_, bd)| d > bd) {
            best = Some((l, d));
        }
    }
    best.map(|(l, _)| l)
        .ok_or_else(|| Error::Bucket(format!("bucket `{}` is empty", bucket.name)))
}

/// Which distribution the `V_head` threshold is tested against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VheadReference {
    Premature,
    #[default]
    Mature,
}

impl VheadReference {
    pub fn name(self) -> &'static str {
        match self {
            VheadReference::Premature => "premature",
            VheadReference::Mature => "mature",
        }
    }
}

/// `V_head = {x : q_ref(x) ≥ α · max_w q_L(w)}`.
pub fn vhead(q_final: &[f64], q_premature: &[f64], alpha: f64, reference: VheadReference) -> Vec<bool> {
    let threshold = alpha * q_final.iter().cloned().fold(0.0, f64::max);
    let q_ref = match reference {
        VheadReference::Premature => q_premature,
        VheadReference::Mature => q_final,
    };
    q_ref.iter().map(|&q| q >= threshold).collect()
}

/// Contrast scores `F`; masked tokens are `−∞`.
pub fn dola_contrast(q_final: &[f64], q_premature: &[f64], alpha: f64, reference: VheadReference) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha {alpha} outside [0, 1]")));
    }
    if q_final.len() != q_premature.len() {
        return Err(Error::Distribution("distributions differ in length".into()));
    }
    check_distribution(q_final)?;
    check_distribution(q_premature)?;
    let mask = vhead(q_final, q_premature, alpha, reference);
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateMask);
    }
    Ok(q_final
        .iter()
        .zip(q_premature)
        .zip(&mask)
        .map(|((&l, &p), &keep)| {
            if !keep {
                f64::NEG_INFINITY
            } else if l == 0.0 || p == 0.0 {
                CLAMP_FLOOR
            } else {
                l.ln() - p.ln()
            }
        })
        .collect())
}

/// `softmax(F)` with `−∞` entries mapped to probability zero.
pub fn contrast_distribution(f: &[f64]) -> Vec<f64> {
    let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = f.iter().map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() }).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// How a multi-token completion is scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScoringMode {
    /// `Σ log p̂(x_t)`.
    PostSoftmax,
    /// `Σ (F(x_t) − min F)`, the minimum taken over finite unclamped scores at each position.
    RawContrast,
    /// `Σ log softmax(logits)(x_t)`, no contrast.
    Baseline,
    /// `Σ (logit(x_t) − min logit + c)`, no contrast and no softmax.
    BaselineShift { c: f64 },
}

impl ScoringMode {
    pub fn name(&self) -> String {
        match self {
            ScoringMode::PostSoftmax => "post_softmax".into(),
            ScoringMode::RawContrast => "raw_contrast".into(),
            ScoringMode::Baseline => "baseline".into(),
            ScoringMode::BaselineShift { c } => format!("baseline_shift({c})"),
        }
    }

    fn uses_contrast(&self) -> bool {
        matches!(self, ScoringMode::PostSoftmax | ScoringMode::RawContrast)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DolaConfig {
    pub bucket: LayerBucket,
    pub alpha: f64,
    #[serde(default)]
    pub vhead_reference: VheadReference,
    pub scoring: ScoringMode,
}

impl DolaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.bucket.layers.is_empty() {
            return Err(Error::Config(format!("bucket `{}` is empty", self.bucket.name)));
        }
        Ok(())
    }
}

/// What the scorer needs at one position: the model's output logits and the
/// lens logits of every layer (index = layer).
#[derive(Debug, Clone, PartialEq)]
pub struct PositionLogits {
    pub output: Vec<f32>,
    pub layers: Vec<Vec<f32>>,
}

/// The contrasted next-token distribution at one position, with the chosen premature layer.
pub fn position_contrast(pos: &PositionLogits, cfg: &DolaConfig) -> Result<(Vec<f64>, usize)> {
    let q_final = linalg::softmax64(&pos.output);
    let mut q_by_layer = vec![Vec::new(); pos.layers.len()];
    for &l in &cfg.bucket.layers {
        let logits = pos
            .layers
            .get(l)
            .ok_or_else(|| Error::Bucket(format!("layer {l} out of range")))?;
        q_by_layer[l] = linalg::softmax64(logits);
    }
    let premature = select_premature(&q_by_layer, &q_final, &cfg.bucket)?;
    let f = dola_contrast(&q_final, &q_by_layer[premature], cfg.alpha, cfg.vhead_reference)?;
    Ok((f, premature))
}

/// Score `targets[t]` under `positions[t]` for every `t` and sum.
pub fn score_positions(positions: &[PositionLogits], targets: &[u32], cfg: &DolaConfig) -> Result<f64> {
    if targets.is_empty() || targets.len() != positions.len() {
        return Err(Error::Domain("completion must be nonempty and aligned with positions".into()));
    }
    let mut total = 0.0;
    for (pos, &y) in positions.iter().zip(targets) {
        let y = y as usize;
        if y >= pos.output.len() {
            return Err(Error::TokenId {
                id: y as u32,
                vocab_size: pos.output.len(),
            });
        }
        total += match cfg.scoring {
            ScoringMode::Baseline => linalg::log_softmax64(&pos.output)[y],
            ScoringMode::BaselineShift { c } => {
                let min = pos.output.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
                pos.output[y] as f64 - min + c
            }
            ScoringMode::PostSoftmax => {
                let (f, _) = position_contrast(pos, cfg)?;
                contrast_distribution(&f)[y].ln()
            }
            ScoringMode::RawContrast => {
                let (f, _) = position_contrast(pos, cfg)?;
                if f[y] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    let min = f
                        .iter()
                        .cloned()
                        .filter(|&v| v.is_finite() && v > CLAMP_FLOOR)
                        .fold(f64::INFINITY, f64::min);
                    let shift = if min.is_finite() { min } else { 0.0 };
                    f[y] - shift
                }
            }
        };
    }
    Ok(total)
}

/// Output and lens logits at positions `len(prefix)−1 .. len(prefix)+len(completion)−2`.
pub fn completion_positions(
    model: &Transformer,
    prefix: &TokenSequence,
    completion: &TokenSequence,
    lens: LensMode,
    with_layers: bool,
) -> Result<Vec<PositionLogits>> {
    if prefix.is_empty() || completion.is_empty() {
        return Err(Error::Domain("prefix and completion must be nonempty".into()));
    }
    let mut ids = prefix.ids.clone();
    ids.extend_from_slice(&completion.ids);
    let capture: Vec<usize> = (prefix.len() - 1..ids.len() - 1).collect();
    let out = model.forward(&TokenSequence::new(ids), if with_layers { &capture } else { &[] })?;
    capture
        .iter()
        .enumerate()
        .map(|(slot, &p)| {
            let layers = if with_layers {
                out.trace
                    .layers
                    .iter()
                    .map(|l| logit_lens(&l.resid_out[slot], model, lens))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            Ok(PositionLogits {
                output: out.logits_at(p).to_vec(),
                layers,
            })
        })
        .collect()
}

pub fn score_completion(
    model: &Transformer,
    prefix: &TokenSequence,
    completion: &TokenSequence,
    cfg: &DolaConfig,
    lens: LensMode,
) -> Result<f64> {
    cfg.validate()?;
    let positions = completion_positions(model, prefix, completion, lens, cfg.scoring.uses_contrast())?;
    score_positions(&positions, &completion.ids, cfg)
}

/// `p̂` for the token following `prefix`.
pub fn dola_next_token(model: &Transformer, prefix: &TokenSequence, cfg: &DolaConfig, lens: LensMode) -> Result<Vec<f64>> {
    cfg.validate()?;
    let last = prefix.len().checked_sub(1).ok_or_else(|| Error::Domain("empty prefix".into()))?;
    let out = model.forward(prefix, &[last])?;
    let pos = PositionLogits {
        output: out.last_logits().to_vec(),
        layers: out
            .trace
            .layers
            .iter()
            .map(|l| logit_lens(&l.resid_out[0], model, lens))
            .collect::<Result<_>>()?,
    };
    let (f, _) = position_contrast(&pos, cfg)?;
    Ok(contrast_distribution(&f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McOption {
    pub text: String,
    pub correct: bool,
}

/// A multiple-choice question with at least one correct and one incorrect option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McQuestion {
    pub question: String,
    pub options: Vec<McOption>,
}

/// A prefix with candidate completions, exactly one of them correct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorItem {
    pub prefix: String,
    pub completions: Vec<String>,
    pub correct_index: usize,
}

pub fn load_mc(path: &Path) -> Result<Vec<McQuestion>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let items: Vec<McQuestion> = serde_json::from_str(&text)?;
    for (i, q) in items.iter().enumerate() {
        if !q.options.iter().any(|o| o.correct) || q.options.iter().all(|o| o.correct) {
            return Err(Error::Metric(format!(
                "item {i} needs at least one correct and one incorrect option"
            )));
        }
    }
    Ok(items)
}

pub fn load_factor(path: &Path) -> Result<Vec<FactorItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let items: Vec<FactorItem> = serde_json::from_str(&text)?;
    for (i, it) in items.iter().enumerate() {
        if it.completions.len() < 2 || it.correct_index >= it.completions.len() {
            return Err(Error::Metric(format!("item {i} has an invalid correct_index")));
        }
    }
    Ok(items)
}

/// Number of leading items used as shots for multiple-choice scoring.
pub const MC_SHOTS: usize = 6;
/// Identifier of the shot template, recorded with results.
pub const MC_TEMPLATE: &str = "qa-arrow";

/// `question → answer` lines for the first [`MC_SHOTS`] items, each with its first correct option.
pub fn mc_prefix(shots: &[McQuestion]) -> String {
    let mut s = String::new();
    for q in shots {
        let answer = q.options.iter().find(|o| o.correct).map(|o| o.text.as_str()).unwrap_or("");
        s.push_str(&format!("{} {ARROW} {answer}\n", q.question));
    }
    s
}

/// Score every option of every non-shot item. Returns, per item, `(score, correct)` per option.
pub fn score_mc(
    model: &Transformer,
    vocab: &Vocab,
    items: &[McQuestion],
    cfg: &DolaConfig,
    lens: LensMode,
) -> Result<Vec<Vec<(f64, bool)>>> {
    if items.len() <= MC_SHOTS {
        return Err(Error::Metric(format!(
            "need more than {MC_SHOTS} items ({MC_SHOTS} are shots), got {}",
            items.len()
        )));
    }
    let shots = mc_prefix(&items[..MC_SHOTS]);
    items[MC_SHOTS..]
        .iter()
        .map(|q| {
            let prefix = vocab.tokenize(&format!("{shots}{} {ARROW}", q.question))?;
            q.options
                .iter()
                .map(|o| Ok((score_completion(model, &prefix, &vocab.tokenize(&o.text)?, cfg, lens)?, o.correct)))
                .collect()
        })
        .collect()
}

/// Score every completion of every item; returns `(scores, correct_index)` per item.
pub fn score_factor(
    model: &Transformer,
    vocab: &Vocab,
    items: &[FactorItem],
    cfg: &DolaConfig,
    lens: LensMode,
) -> Result<Vec<(Vec<f64>, usize)>> {
    items
        .iter()
        .map(|it| {
            let prefix = vocab.tokenize(&it.prefix)?;
            let scores = it
                .completions
                .iter()
                .map(|c| score_completion(model, &prefix, &vocab.tokenize(c)?, cfg, lens))
                .collect::<Result<_>>()?;
            Ok((scores, it.correct_index))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bucket(layers: &[usize]) -> LayerBucket {
        LayerBucket::new("b", layers.to_vec(), 8).unwrap()
    }

    #[test]
    fn jsd_golden_values() {
        assert!((jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 0.215762).abs() < 1e-5);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(jsd(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
    }

    #[test]
    fn jsd_validates_inputs() {
        assert!(jsd(&[1.0], &[0.5, 0.5]).is_err());
        assert!(jsd(&[0.6, 0.6], &[0.5, 0.5]).is_err());
        assert!(jsd(&[1.5, -0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn bucket_examples() {
        let small = make_buckets(32, BucketRegime::Small).unwrap();
        assert_eq!(small[0].layers, (0..16).step_by(2).collect::<Vec<_>>());
        assert_eq!(small[0].name, "0-50%");
        assert!(small[3].layers.iter().all(|l| l % 2 == 0 && *l != 31));
        assert_eq!(small[3].layers.len(), 16);
        let large = make_buckets(8, BucketRegime::Large).unwrap();
        assert_eq!(large[3].layers, vec![6]);
        assert!(make_buckets(3, BucketRegime::Small).is_err());
        assert!(make_buckets(4, BucketRegime::Large).is_err());
        let four = make_buckets(4, BucketRegime::Small).unwrap();
        let sets: Vec<Vec<usize>> = four.into_iter().map(|b| b.layers).collect();
        assert_eq!(sets, vec![vec![0], vec![2], vec![2], vec![0, 2]]);
    }

    #[test]
    fn bucket_rejects_final_layer() {
        assert!(LayerBucket::new("x", vec![7], 8).is_err());
        assert!(LayerBucket::new("x", vec![], 8).is_err());
    }

    #[test]
    fn premature_selection() {
        let qf = vec![0.7, 0.2, 0.1];
        let stack = vec![qf.clone(), vec![0.1, 0.1, 0.8], qf.clone(), qf.clone()];
        assert_eq!(select_premature(&stack, &qf, &bucket(&[0, 1, 2])).unwrap(), 1);
        assert_eq!(select_premature(&stack, &qf, &bucket(&[2])).unwrap(), 2);
        assert_eq!(select_premature(&stack, &qf, &bucket(&[2, 0])).unwrap(), 0);
    }

    #[test]
    fn hand_contrast_example() {
        let ql = [0.5, 0.3, 0.2];
        let qp = [0.6, 0.3, 0.1];
        for mode in [VheadReference::Premature, VheadReference::Mature] {
            let f = dola_contrast(&ql, &qp, 0.5, mode).unwrap();
            assert!((f[0] - (5.0f64 / 6.0).ln()).abs() < 1e-12);
            assert!(f[1].abs() < 1e-12);
            assert_eq!(f[2], f64::NEG_INFINITY);
            let p = contrast_distribution(&f);
            assert!((p[0] - 0.45455).abs() < 1e-4);
            assert!((p[1] - 0.54545).abs() < 1e-4);
            assert_eq!(p[2], 0.0);
        }
    }

    #[test]
    fn modes_differ_when_orders_cross_threshold() {
        let ql = [0.6, 0.25, 0.15];
        let qp = [0.2, 0.1, 0.7];
        let prem = vhead(&ql, &qp, 0.5, VheadReference::Premature);
        let mat = vhead(&ql, &qp, 0.5, VheadReference::Mature);
        assert_eq!(prem, vec![false, false, true]);
        assert_eq!(mat, vec![true, false, false]);
    }

    #[test]
    fn zero_probabilities_clamp() {
        let f = dola_contrast(&[0.5, 0.5, 0.0], &[0.4, 0.6, 0.0], 0.0, VheadReference::Mature).unwrap();
        assert_eq!(f[2], CLAMP_FLOOR);
    }

    #[test]
    fn all_masked_is_degenerate() {
        assert!(dola_contrast(&[0.5, 0.5], &[0.0, 1.0], 1.0, VheadReference::Premature).is_ok());
        let err = dola_contrast(&[0.9, 0.1], &[0.5, 0.5], 1.0, VheadReference::Premature);
        assert!(matches!(err, Err(Error::DegenerateMask)));
        assert!(dola_contrast(&[0.9, 0.1], &[0.1, 0.9], 1.5, VheadReference::Mature).is_err());
    }

    fn pos(output: [f32; 3], premature: [f32; 3]) -> PositionLogits {
        PositionLogits {
            output: output.to_vec(),
            layers: vec![premature.to_vec(), output.to_vec()],
        }
    }

    fn cfg(scoring: ScoringMode) -> DolaConfig {
        DolaConfig {
            bucket: LayerBucket::new("0", vec![0], 2).unwrap(),
            alpha: 0.0,
            vhead_reference: VheadReference::Mature,
            scoring,
        }
    }

    #[test]
    fn single_token_baseline_is_log_prob() {
        let p = pos([1.0, 2.0, 0.5], [0.0; 3]);
        let s = score_positions(&[p.clone()], &[1], &cfg(ScoringMode::Baseline)).unwrap();
        assert!((s - linalg::log_softmax64(&p.output)[1]).abs() < 1e-12);
    }

    #[test]
    fn baseline_shift_is_linear_in_c() {
        let ps = vec![pos([1.0, 2.0, 0.5], [0.0; 3]); 3];
        let s0 = score_positions(&ps, &[0, 1, 2], &cfg(ScoringMode::BaselineShift { c: 0.0 })).unwrap();
        let s7 = score_positions(&ps, &[0, 1, 2], &cfg(ScoringMode::BaselineShift { c: 7.0 })).unwrap();
        assert_eq!(s7 - s0, 21.0);
    }

    #[test]
    fn masked_completion_token_scores_negative_infinity() {
        let mut c = cfg(ScoringMode::PostSoftmax);
        c.alpha = 0.9;
        let p = pos([5.0, 0.0, 0.0], [0.0; 3]);
        assert_eq!(score_positions(&[p.clone()], &[1], &c).unwrap(), f64::NEG_INFINITY);
        c.scoring = ScoringMode::RawContrast;
        assert_eq!(score_positions(&[p], &[1], &c).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn raw_contrast_is_nonnegative_on_unmasked_tokens() {
        let p = pos([1.0, 2.0, 0.5], [2.0, 0.0, 1.0]);
        for y in 0..3 {
            assert!(score_positions(&[p.clone()], &[y], &cfg(ScoringMode::RawContrast)).unwrap() >= 0.0);
        }
    }
}
