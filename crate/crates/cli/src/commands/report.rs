use std::collections::BTreeMap;

use serde::Deserialize;

use super::sweep::{quantile_rows, HEATMAP_FILE, QUANTILES_FILE, RECOVERY_FILE};
use super::{managed, RunOptions, RunStatus};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::io::csv_bytes;

#[derive(Debug, Deserialize)]
struct RecoveryRow {
    model_id: String,
    task: String,
    method: String,
    seed: u64,
    peak: Option<f64>,
    status: String,
}

/// Pool the recovery tables of several sweep runs into one quantile table and heatmap.
pub fn cmd_report(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunStatus> {
    if cfg.report.runs.is_empty() {
        return Err(CliError::Config("report needs at least one entry in report.runs".into()));
    }
    let mut rows = Vec::new();
    for run in &cfg.report.runs {
        let path = run.join(RECOVERY_FILE);
        let mut reader = csv::Reader::from_path(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for r in reader.deserialize::<RecoveryRow>() {
            rows.push(r?);
        }
    }
    managed("report", cfg, opts, |out| {
        let mut order = Vec::new();
        let mut peaks: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut heat = Vec::new();
        for r in &rows {
            if !order.contains(&r.method) {
                order.push(r.method.clone());
            }
            let entry = peaks.entry(r.method.clone()).or_default();
            if let (Some(p), "ok") = (r.peak, r.status.as_str()) {
                entry.push(p);
                heat.push(vec![r.task.clone(), r.model_id.clone(), r.method.clone(), r.seed.to_string(), p.to_string()]);
            }
        }
        out.write(QUANTILES_FILE, quantile_rows(&peaks, &order)?)?;
        out.write(HEATMAP_FILE, csv_bytes(&["task", "model_id", "method", "seed", "peak_recovery"], &heat)?)?;
        Ok(())
    })
}
