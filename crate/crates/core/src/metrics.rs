//! Multiple-choice metrics, steering recovery and quantile pass rates.
//!
//! Every argmax-style comparison is strict: ties count as failures.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Option scores of one multiple-choice item. Scores are log-masses (or any
/// monotone score for MC1/MC3); `−∞` is allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McItem {
    pub scores: Vec<(usize, f64, bool)>,
}

impl McItem {
    pub fn new(scores: Vec<(f64, bool)>) -> Result<Self> {
        let item = McItem {
            scores: scores.into_iter().enumerate().map(|(i, (s, c))| (i, s, c)).collect(),
        };
        item.validate()?;
        Ok(item)
    }

    fn validate(&self) -> Result<()> {
        if self.scores.is_empty() {
            return Err(Error::Metric("item has no options".into()));
        }
        if !self.scores.iter().any(|s| s.2) || self.scores.iter().all(|s| s.2) {
            return Err(Error::Metric("item needs a correct and an incorrect option".into()));
        }
        if self.scores.iter().any(|s| s.1.is_nan() || s.1 == f64::INFINITY) {
            return Err(Error::Metric("scores must be finite or −∞".into()));
        }
        Ok(())
    }

    fn correct(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().filter(|s| s.2).map(|s| s.1)
    }

    fn max_incorrect(&self) -> f64 {
        self.scores
            .iter()
            .filter(|s| !s.2)
            .map(|s| s.1)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// 1 iff the first correct option strictly beats every incorrect option.
pub fn mc1(item: &McItem) -> Result<u8> {
    item.validate()?;
    let best = item.correct().next().expect("validated");
    Ok(u8::from(best > item.max_incorrect()))
}

/// Share of exponentiated mass on the correct options.
pub fn mc2(item: &McItem) -> Result<f64> {
    item.validate()?;
    let max = item.scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Metric("every option has zero mass".into()));
    }
    let mass = |s: f64| (s - max).exp();
    let correct: f64 = item.correct().map(mass).sum();
    let total: f64 = item.scores.iter().map(|s| mass(s.1)).sum();
    Ok(correct / total)
}

/// Fraction of correct options scoring strictly above the best incorrect option.
pub fn mc3(item: &McItem) -> Result<f64> {
    item.validate()?;
    let bar = item.max_incorrect();
    let n = item.correct().count();
    Ok(item.correct().filter(|&s| s > bar).count() as f64 / n as f64)
}

/// Fraction of items whose correct completion strictly outscores the others.
pub fn completion_accuracy(items: &[(Vec<f64>, usize)]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Metric("no items".into()));
    }
    let mut hits = 0;
    for (scores, correct) in items {
        let c = *scores
            .get(*correct)
            .ok_or_else(|| Error::Metric(format!("correct index {correct} out of range")))?;
        if scores.iter().enumerate().all(|(i, &s)| i == *correct || c > s) {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

/// Means of MC1, MC2 and MC3 over a dataset.
pub fn mc_means(items: &[McItem]) -> Result<(f64, f64, f64)> {
    if items.is_empty() {
        return Err(Error::Metric("no items".into()));
    }
    let n = items.len() as f64;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for it in items {
        a += mc1(it)? as f64;
        b += mc2(it)?;
        c += mc3(it)?;
    }
    Ok((a / n, b / n, c / n))
}

/// One cell of a steering or ICL evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model_id: String,
    pub task: String,
    pub method: String,
    pub layer: Option<usize>,
    pub lambda: Option<f64>,
    pub n_heads: Option<usize>,
    pub k_shot: usize,
    pub accuracy: f64,
    pub seed: u64,
}

/// Tasks whose 5-shot accuracy falls below this are excluded from recovery.
pub const BASELINE_FLOOR: f64 = 0.2;
pub const EXCLUSION_MARKER: &str = "baseline-too-weak";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub task: String,
    pub method: String,
    pub peak: f64,
    pub avg: f64,
    pub baseline_5shot: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecoveryOutcome {
    Summary(RecoverySummary),
    Excluded { task: String, method: String, marker: &'static str },
}

/// Peak and layer-averaged recovery of steered zero-shot accuracy relative to
/// the 5-shot baseline. Records must share one task and method and carry a layer.
pub fn recovery(records: &[EvalRecord], baseline_5shot: f64) -> Result<RecoveryOutcome> {
    let first = records.first().ok_or_else(|| Error::Metric("no records".into()))?;
    if records.iter().any(|r| r.task != first.task || r.method != first.method) {
        return Err(Error::Metric("recovery records mix tasks or methods".into()));
    }
    if !(0.0..=1.0).contains(&baseline_5shot) {
        return Err(Error::Metric(format!("baseline {baseline_5shot} outside [0, 1]")));
    }
    if baseline_5shot < BASELINE_FLOOR {
        return Ok(RecoveryOutcome::Excluded {
            task: first.task.clone(),
            method: first.method.clone(),
            marker: EXCLUSION_MARKER,
        });
    }
    let mut slices: BTreeMap<(Option<usize>, Option<u64>), Vec<f64>> = BTreeMap::new();
    for r in records {
        if r.layer.is_none() {
            return Err(Error::Metric("steered record without a layer".into()));
        }
        if !(0.0..=1.0).contains(&r.accuracy) {
            return Err(Error::Metric(format!("accuracy {} outside [0, 1]", r.accuracy)));
        }
        slices
            .entry((r.n_heads, r.lambda.map(f64::to_bits)))
            .or_default()
            .push(r.accuracy / baseline_5shot);
    }
    let peak = slices.values().flatten().cloned().fold(0.0, f64::max);
    let avg = slices
        .values()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .fold(0.0, f64::max);
    Ok(RecoveryOutcome::Summary(RecoverySummary {
        task: first.task.clone(),
        method: first.method.clone(),
        peak,
        avg,
        baseline_5shot,
    }))
}

pub const QUANTILES: [f64; 4] = [0.50, 0.75, 0.90, 1.00];

/// Percentage of peaks at or above each quantile of the baseline.
pub fn quantile_pass_rate(peaks: &[f64], quantiles: &[f64]) -> Result<Vec<f64>> {
    if peaks.is_empty() {
        return Err(Error::Metric("no summaries".into()));
    }
    Ok(quantiles
        .iter()
        .map(|&q| 100.0 * peaks.iter().filter(|&&p| p >= q).count() as f64 / peaks.len() as f64)
        .collect())
}
