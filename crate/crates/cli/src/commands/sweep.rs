use std::collections::BTreeMap;

use rayon::prelude::*;
use serde_json::json;
use steerlab::metrics::{quantile_pass_rate, recovery, EvalRecord, RecoveryOutcome, BASELINE_FLOOR, EXCLUSION_MARKER, QUANTILES};
use steerlab::seed;
use steerlab::steering::{
    compute_cie, mean_head_activations, run_sweep, tv_donor, CieTable, SweepContext, SweepGrid, SweepMethod, BASELINE_SHOTS,
    CIE_METRIC, FV_SHOTS, PATCH_POSITION, TV_SHOTS,
};
use steerlab::tasks::{split_train_test, IclTask};

use super::{managed, pool, RunOptions, RunStatus};
use crate::cache::Cache;
use crate::config::{ExperimentConfig, Method};
use crate::error::{CliError, Result};
use crate::io::{csv_bytes, file_sha, fmt_opt, load_model, load_tasks, LoadedModel};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const RECOVERY_FILE: &str = "recovery.csv";
pub const QUANTILES_FILE: &str = "quantiles.csv";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const SURFACE_FILE: &str = "surface.csv";
pub const METADATA_FILE: &str = "metadata.json";
pub const CACHE_DIR: &str = "cache";

pub const SWEEP_HEADER: [&str; 12] = [
    "model_id",
    "task",
    "method",
    "layer",
    "lambda",
    "n_heads",
    "k_shot",
    "accuracy",
    "seed",
    "patch_position",
    "cie_metric",
    "vhead_mode",
];
pub const RECOVERY_HEADER: [&str; 8] = ["model_id", "task", "method", "seed", "baseline_5shot", "peak", "avg", "status"];

/// `(method label, seed, outcome)` per evaluated unit.
pub(crate) type Summaries = Vec<(String, u64, RecoveryOutcome)>;

struct Unit<'a> {
    task: &'a IclTask,
    task_sha: String,
    seed: u64,
}

struct UnitResult {
    records: Vec<EvalRecord>,
    cie: Option<CieTable>,
    donor: Option<String>,
    split: (usize, usize),
}

/// Sweep layers × λ (× n for function vectors) on every evaluated task and seed.
pub fn cmd_sweep(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunStatus> {
    if !matches!(cfg.method, Method::Fv | Method::Tv) {
        return Err(CliError::Config(format!("sweep needs method fv or tv, not {}", cfg.method.name())));
    }
    let dir = cfg
        .model
        .dir
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep requires model.dir".into()))?;
    let loaded = load_model(dir)?;
    let tasks = load_tasks(&cfg.tasks)?;
    let evaluated = cfg.evaluated(&tasks)?;
    let n_layers = loaded.model.config().n_layers;
    let grid = SweepGrid {
        layers: cfg.sweep.layers.clone().unwrap_or_else(|| (0..n_layers).collect()),
        lambdas: cfg.sweep.lambdas.clone(),
        head_counts: cfg.sweep.head_counts.clone(),
    };
    if let Some(&l) = grid.layers.iter().find(|&&l| l >= n_layers) {
        return Err(CliError::Config(format!("sweep layer {l} out of range for {n_layers} layers")));
    }
    let mut units = Vec::new();
    for t in &evaluated {
        let idx = tasks.iter().position(|u| u.name == t.name).expect("evaluated task is loaded");
        let sha = file_sha(&cfg.tasks[idx])?;
        for &s in &cfg.seeds {
            units.push(Unit {
                task: t,
                task_sha: sha.clone(),
                seed: s,
            });
        }
    }
    managed("sweep", cfg, opts, |out| {
        let cache = Cache::new(&cfg.output_dir.join(CACHE_DIR));
        let results: Vec<UnitResult> = pool(opts.workers)?.install(|| {
            units
                .par_iter()
                .map(|u| run_unit(cfg, &loaded, &grid, &cache, u))
                .collect::<Result<Vec<_>>>()
        })?;

        let records: Vec<EvalRecord> = results.iter().flat_map(|r| r.records.iter().cloned()).collect();
        out.write(SWEEP_FILE, sweep_csv(&records)?)?;

        let total_heads = loaded.model.config().total_heads();
        let summaries = summarize(cfg, &records, &units, total_heads)?;
        out.write(RECOVERY_FILE, recovery_csv(&loaded.id, &summaries)?)?;
        out.write(QUANTILES_FILE, quantiles_csv(&summaries)?)?;
        out.write(HEATMAP_FILE, heatmap_csv(&loaded.id, &summaries)?)?;
        out.write(SURFACE_FILE, surface_csv(&records)?)?;
        for (u, r) in units.iter().zip(&results) {
            if let Some(cie) = &r.cie {
                out.write(&format!("cie/{}_seed{}.csv", u.task.name, u.seed), cie.to_csv())?;
            }
        }
        let splits: BTreeMap<String, serde_json::Value> = units
            .iter()
            .zip(&results)
            .map(|(u, r)| {
                (
                    format!("{}/seed{}", u.task.name, u.seed),
                    json!({"train": r.split.0, "test": r.split.1, "tv_donor": r.donor}),
                )
            })
            .collect();
        let alpha = match cfg.method {
            Method::Fv => cfg.sweep.fv_alpha,
            _ => cfg.sweep.tv_alpha,
        };
        out.write_json(
            METADATA_FILE,
            &json!({
                "model_id": loaded.id,
                "method": cfg.method.name(),
                "alpha": alpha,
                "patch_position": PATCH_POSITION,
                "cie_metric": CIE_METRIC,
                "fv_shots": FV_SHOTS,
                "tv_shots": TV_SHOTS,
                "baseline_shots": BASELINE_SHOTS,
                "recovery": "aggregate accuracy ratio to the 5-shot baseline",
                "baseline_floor": BASELINE_FLOOR,
                "exclusion_marker": EXCLUSION_MARKER,
                "default_lambda": cfg.sweep.default_lambda,
                "default_head_counts": cfg.sweep.default_head_counts,
                "units": splits,
            }),
        )?;
        Ok(())
    })
}

fn split(task: &IclTask, test_size: usize, seed: u64) -> Result<(IclTask, IclTask)> {
    if test_size == 0 || test_size >= task.len() {
        return Err(CliError::Config(format!(
            "test_size {test_size} leaves no train or test pairs in `{}` ({} pairs)",
            task.name,
            task.len()
        )));
    }
    let frac = (task.len() - test_size) as f64 / task.len() as f64;
    Ok(split_train_test(task, frac, seed)?)
}

fn run_unit(cfg: &ExperimentConfig, loaded: &LoadedModel, grid: &SweepGrid, cache: &Cache, u: &Unit<'_>) -> Result<UnitResult> {
    let (train, test) = split(u.task, cfg.split.test_size, u.seed)?;
    let ctx = SweepContext {
        model: &loaded.model,
        vocab: &loaded.vocab,
        model_id: &loaded.id,
        train: &train,
        test: &test,
        n_eval: cfg.sweep.n_eval,
        seed: u.seed,
    };
    let s = &cfg.sweep;
    match cfg.method {
        Method::Fv => {
            let base = [
                loaded.weights_sha.as_bytes(),
                u.task_sha.as_bytes(),
                &u.seed.to_le_bytes(),
                &cfg.split.test_size.to_le_bytes(),
                &s.mean_prompts.to_le_bytes(),
                &FV_SHOTS.to_le_bytes(),
            ];
            let means_key = Cache::key(&base);
            let means = match cache.get_means(&means_key) {
                Some(m) => m,
                None => {
                    log::info!("{}: computing head means", u.task.name);
                    let m = mean_head_activations(&loaded.model, &loaded.vocab, &train, s.mean_prompts, FV_SHOTS, seed::derive(u.seed, "means"))?;
                    cache.put_means(&means_key, &m)?;
                    m
                }
            };
            let mut cie_parts = base.to_vec();
            let trials = s.cie_trials.to_le_bytes();
            cie_parts.push(&trials);
            let cie_key = Cache::key(&cie_parts);
            let cie = match cache.get_cie(&cie_key) {
                Some(c) => c,
                None => {
                    log::info!("{}: CIE cache miss, recomputing", u.task.name);
                    let c = compute_cie(&loaded.model, &loaded.vocab, &train, &means, s.cie_trials, FV_SHOTS, seed::derive(u.seed, "cie"))?;
                    cache.put_cie(&cie_key, &c)?;
                    c
                }
            };
            let records = run_sweep(
                &ctx,
                grid,
                &SweepMethod::Fv {
                    means: &means,
                    cie: &cie,
                    alpha: s.fv_alpha as f32,
                },
            )?;
            Ok(UnitResult {
                records,
                cie: Some(cie),
                donor: None,
                split: (train.len(), test.len()),
            })
        }
        _ => {
            let records = run_sweep(&ctx, grid, &SweepMethod::Tv { alpha: s.tv_alpha as f32 })?;
            let donor = tv_donor(&train, TV_SHOTS, seed::derive(u.seed, "tv"))?;
            Ok(UnitResult {
                records,
                cie: None,
                donor: Some(donor.spec.render()),
                split: (train.len(), test.len()),
            })
        }
    }
}

fn sweep_csv(records: &[EvalRecord]) -> Result<Vec<u8>> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let steered = r.method != "icl";
            vec![
                r.model_id.clone(),
                r.task.clone(),
                r.method.clone(),
                fmt_opt(r.layer),
                fmt_opt(r.lambda),
                fmt_opt(r.n_heads),
                r.k_shot.to_string(),
                r.accuracy.to_string(),
                r.seed.to_string(),
                if steered { PATCH_POSITION } else { "n/a" }.to_string(),
                if r.method == "fv" { CIE_METRIC } else { "n/a" }.to_string(),
                "n/a".to_string(),
            ]
        })
        .collect();
    csv_bytes(&SWEEP_HEADER, &rows)
}

/// Recovery per (task, seed) for every reported method label, in unit order.
fn summarize(cfg: &ExperimentConfig, records: &[EvalRecord], units: &[Unit<'_>], total_heads: usize) -> Result<Summaries> {
    let defaults = SweepGrid {
        layers: Vec::new(),
        lambdas: Vec::new(),
        head_counts: cfg.sweep.default_head_counts.clone(),
    }
    .clamped_head_counts(total_heads);
    let mut out = Vec::new();
    for u in units {
        let mine: Vec<&EvalRecord> = records
            .iter()
            .filter(|r| r.task == u.task.name && r.seed == u.seed)
            .collect();
        let baseline = mine
            .iter()
            .find(|r| r.method == "icl" && r.k_shot == 5)
            .map(|r| r.accuracy)
            .ok_or_else(|| CliError::Config("sweep produced no 5-shot baseline".into()))?;
        let steered: Vec<EvalRecord> = mine.iter().filter(|r| r.method != "icl").map(|r| (*r).clone()).collect();
        let labelled: Vec<(&str, Vec<EvalRecord>)> = match cfg.method {
            Method::Fv => {
                let default: Vec<EvalRecord> = steered
                    .iter()
                    .filter(|r| r.lambda == Some(cfg.sweep.default_lambda) && r.n_heads.is_some_and(|n| defaults.contains(&n)))
                    .cloned()
                    .collect();
                vec![("fv-default", default), ("fv-searched", steered)]
            }
            _ => vec![("tv", steered)],
        };
        for (label, mut recs) in labelled {
            if recs.is_empty() {
                return Err(CliError::Config(format!("no sweep cells for `{label}`")));
            }
            for r in &mut recs {
                r.method = label.to_string();
            }
            out.push((label.to_string(), u.seed, recovery(&recs, baseline)?));
        }
    }
    Ok(out)
}

fn recovery_csv(model_id: &str, summaries: &Summaries) -> Result<Vec<u8>> {
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|(label, seed, outcome)| match outcome {
            RecoveryOutcome::Summary(s) => vec![
                model_id.to_string(),
                s.task.clone(),
                label.clone(),
                seed.to_string(),
                s.baseline_5shot.to_string(),
                s.peak.to_string(),
                s.avg.to_string(),
                "ok".to_string(),
            ],
            RecoveryOutcome::Excluded { task, marker, .. } => vec![
                model_id.to_string(),
                task.clone(),
                label.clone(),
                seed.to_string(),
                String::new(),
                String::new(),
                String::new(),
                marker.to_string(),
            ],
        })
        .collect();
    csv_bytes(&RECOVERY_HEADER, &rows)
}

/// `method,0.50,0.75,0.90,1.00` with the percentage of cells whose peak reaches each quantile.
pub(crate) fn quantile_rows(peaks: &BTreeMap<String, Vec<f64>>, order: &[String]) -> Result<Vec<u8>> {
    let header: Vec<String> = std::iter::once("method".to_string())
        .chain(QUANTILES.iter().map(|q| format!("{q:.2}")))
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for label in order {
        let p = &peaks[label];
        let mut row = vec![label.clone()];
        if p.is_empty() {
            row.extend(QUANTILES.iter().map(|_| "n/a".to_string()));
        } else {
            row.extend(quantile_pass_rate(p, &QUANTILES)?.iter().map(|v| v.to_string()));
        }
        rows.push(row);
    }
    csv_bytes(&header, &rows)
}

fn quantiles_csv(summaries: &Summaries) -> Result<Vec<u8>> {
    let mut order: Vec<String> = Vec::new();
    let mut peaks: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (label, _, outcome) in summaries {
        if !order.contains(label) {
            order.push(label.clone());
        }
        let entry = peaks.entry(label.clone()).or_default();
        if let RecoveryOutcome::Summary(s) = outcome {
            entry.push(s.peak);
        }
    }
    quantile_rows(&peaks, &order)
}

fn heatmap_csv(model_id: &str, summaries: &Summaries) -> Result<Vec<u8>> {
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .filter_map(|(label, seed, outcome)| match outcome {
            RecoveryOutcome::Summary(s) => Some(vec![
                s.task.clone(),
                model_id.to_string(),
                label.clone(),
                seed.to_string(),
                s.peak.to_string(),
            ]),
            RecoveryOutcome::Excluded { .. } => None,
        })
        .collect();
    csv_bytes(&["task", "model_id", "method", "seed", "peak_recovery"], &rows)
}

fn surface_csv(records: &[EvalRecord]) -> Result<Vec<u8>> {
    let baseline = |r: &EvalRecord| {
        records
            .iter()
            .find(|b| b.method == "icl" && b.k_shot == 5 && b.task == r.task && b.seed == r.seed)
            .map(|b| b.accuracy)
    };
    let rows: Vec<Vec<String>> = records
        .iter()
        .filter(|r| r.method != "icl")
        .map(|r| {
            let rec = baseline(r).filter(|&b| b > 0.0).map(|b| r.accuracy / b);
            vec![
                r.method.clone(),
                r.task.clone(),
                r.seed.to_string(),
                fmt_opt(r.layer),
                fmt_opt(r.lambda),
                fmt_opt(r.n_heads),
                r.accuracy.to_string(),
                fmt_opt(rec),
            ]
        })
        .collect();
    csv_bytes(&["method", "task", "seed", "layer", "lambda", "n_heads", "accuracy", "recovery"], &rows)
}
