use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use steerlab_cli::commands::{cmd_dola, cmd_profile, cmd_report, cmd_sweep, cmd_train, CommandFn, RunOptions, RunStatus};
use steerlab_cli::config::{ExperimentConfig, Overrides};
use steerlab_cli::reference::write_reference;
use steerlab_cli::Result;

#[derive(Parser)]
#[command(name = "steerlab", version, about = "Steering, logit-lens and DoLa experiments on small transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from `[model.train]`.
    Train(RunArgs),
    /// Two-stage DoLa bucket and α search on a multiple-choice set.
    Dola(RunArgs),
    /// Function-vector or task-vector sweep.
    Sweep(RunArgs),
    /// Logit-lens or apathy profile.
    Profile(RunArgs),
    /// Aggregate recovery tables of earlier sweeps.
    Report(RunArgs),
    /// Write the reference tasks and configs into a directory.
    Reference {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seed list with this one seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Rerun even when the output directory is up to date.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    let (args, cmd): (RunArgs, CommandFn) = match cli.command {
        Command::Train(a) => (a, cmd_train),
        Command::Dola(a) => (a, cmd_dola),
        Command::Sweep(a) => (a, cmd_sweep),
        Command::Profile(a) => (a, cmd_profile),
        Command::Report(a) => (a, cmd_report),
        Command::Reference { out } => {
            for p in write_reference(&out)? {
                println!("{}", p.display());
            }
            return Ok(());
        }
    };
    let overrides = Overrides {
        seed: args.seed,
        out: args.out,
    };
    let cfg = ExperimentConfig::load(&args.config, &overrides)?;
    let opts = RunOptions {
        force: args.force,
        workers: args.workers,
    };
    match cmd(&cfg, opts)? {
        RunStatus::Completed => log::info!("wrote {}", cfg.output_dir.display()),
        RunStatus::UpToDate => log::info!("{} already up to date", cfg.output_dir.display()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
