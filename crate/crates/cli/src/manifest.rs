//! Run manifests.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    /// Unix seconds.
    pub started: u64,
    pub finished: u64,
    /// Output files relative to the run directory, sorted.
    pub outputs: Vec<String>,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("steerlab".to_string(), steerlab::VERSION.to_string()),
        ("steerlab-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("weight_format".to_string(), steerlab::model::WEIGHT_FORMAT_VERSION.to_string()),
    ])
}

impl RunManifest {
    pub fn load(dir: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    /// Whether `dir` already holds a complete run of `command` with `hash`.
    pub fn is_current(dir: &Path, command: &str, hash: &str) -> bool {
        match Self::load(dir) {
            Some(m) => m.command == command && m.config_hash == hash && m.outputs.iter().all(|f| dir.join(f).is_file()),
            None => false,
        }
    }

    /// Delete the outputs a previous manifest in `dir` lists, and the manifest itself.
    pub fn clear_previous(dir: &Path) -> Result<()> {
        if let Some(m) = Self::load(dir) {
            for f in m.outputs {
                let p = dir.join(f);
                if p.is_file() {
                    std::fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
                }
            }
            let p = dir.join(MANIFEST_FILE);
            std::fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
        }
        Ok(())
    }
}
