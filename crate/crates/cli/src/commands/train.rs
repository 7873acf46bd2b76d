use steerlab::tasks::vocab_for;
use steerlab::training::{loss_csv, train};

use super::{managed, RunOptions, RunStatus};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::io::load_tasks;

pub const SPEC_FILE: &str = "train_spec.json";
pub const LOSS_FILE: &str = "loss.csv";

/// Train a model on the configured tasks; writes weights, config, vocabulary,
/// the resolved training spec and the loss curve.
pub fn cmd_train(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunStatus> {
    let block = cfg
        .model
        .train
        .as_ref()
        .ok_or_else(|| CliError::Config("train requires a [model.train] block".into()))?;
    if cfg.seeds.len() != 1 {
        return Err(CliError::Config("train takes exactly one seed".into()));
    }
    let tasks = load_tasks(&cfg.tasks)?;
    if tasks.is_empty() {
        return Err(CliError::Config("train requires at least one task".into()));
    }
    let vocab = vocab_for(&tasks);
    let names: Vec<String> = tasks.iter().map(|t| t.name.clone()).collect();
    let spec = block.spec(&names, vocab.len(), cfg.seeds[0])?;
    managed("train", cfg, opts, |out| {
        let outcome = train(&spec, &tasks, &vocab)?;
        out.save_model(&spec.model, &outcome.weights, &vocab)?;
        out.write_json(SPEC_FILE, &spec)?;
        out.write(LOSS_FILE, loss_csv(&outcome.losses))?;
        Ok(())
    })
}
