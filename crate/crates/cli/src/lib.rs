//! Experiment harness around `steerlab`: config files, run manifests, caching
//! and CSV/SVG outputs for each subcommand.

pub mod cache;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod reference;
pub mod svg;

pub use error::{CliError, Result};
