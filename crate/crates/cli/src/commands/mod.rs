//! Subcommand implementations.

mod dola;
mod profile;
mod report;
mod sweep;
mod train;

pub use dola::{cmd_dola, synthetic_mc};
pub use profile::{cmd_profile, plot_profile};
pub use report::cmd_report;
pub use sweep::cmd_sweep;
pub use train::cmd_train;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::io::Outputs;
use crate::manifest::{self, RunManifest};

/// Signature shared by the config-driven subcommands.
pub type CommandFn = fn(&ExperimentConfig, RunOptions) -> Result<RunStatus>;

/// Flags shared by every command.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub force: bool,
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { force: false, workers: 1 }
    }
}

/// What happened to a command invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// The output directory already holds a run with the same config hash.
    UpToDate,
}

/// Run `body` under a manifest: skip when current, clear stale outputs, record the new ones.
pub(crate) fn managed<F>(command: &str, cfg: &ExperimentConfig, opts: RunOptions, body: F) -> Result<RunStatus>
where
    F: FnOnce(&mut Outputs) -> Result<()>,
{
    let dir = &cfg.output_dir;
    let hash = cfg.hash(command);
    if !opts.force && RunManifest::is_current(dir, command, &hash) {
        log::info!("{} is up to date; pass --force to rerun", dir.display());
        return Ok(RunStatus::UpToDate);
    }
    RunManifest::clear_previous(dir)?;
    let started = manifest::now();
    let mut out = Outputs::new(dir)?;
    body(&mut out)?;
    let mut outputs = out.files;
    outputs.sort();
    RunManifest {
        command: command.to_string(),
        config_hash: hash,
        versions: manifest::versions(),
        seeds: cfg.seeds.clone(),
        started,
        finished: manifest::now(),
        outputs,
    }
    .save(dir)?;
    Ok(RunStatus::Completed)
}

/// A rayon pool with `workers` threads.
pub(crate) fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| crate::error::CliError::Config(format!("cannot start {workers} workers: {e}")))
}
