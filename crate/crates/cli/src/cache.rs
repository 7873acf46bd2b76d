//! Content-addressed cache for head means and CIE tables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use steerlab::steering::{CieTable, HeadMeanTable};

use crate::error::{CliError, Result};

pub struct Cache {
    dir: PathBuf,
}

/// Floats stored as bit patterns so a cache hit is bit-identical to a recompute.
#[derive(Serialize, Deserialize)]
struct StoredMeans {
    task: String,
    n_prompts: usize,
    means: Vec<Vec<Vec<u32>>>,
}

#[derive(Serialize, Deserialize)]
struct StoredCie {
    task: String,
    trials: usize,
    cie: Vec<Vec<u64>>,
}

impl Cache {
    pub fn new(dir: &Path) -> Self {
        Cache { dir: dir.to_path_buf() }
    }

    /// Hex SHA-256 over length-prefixed parts.
    pub fn key(parts: &[&[u8]]) -> String {
        let mut h = Sha256::new();
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        hex::encode(h.finalize())
    }

    fn path(&self, kind: &str, key: &str) -> PathBuf {
        self.dir.join(format!("{kind}-{key}.json"))
    }

    fn get<T: for<'de> Deserialize<'de>>(&self, kind: &str, key: &str) -> Option<T> {
        let text = std::fs::read_to_string(self.path(kind, key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn put<T: Serialize>(&self, kind: &str, key: &str, value: &T) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        let path = self.path(kind, key);
        std::fs::write(&path, serde_json::to_string(value)?).map_err(|e| CliError::io(&path, e))
    }

    pub fn get_means(&self, key: &str) -> Option<HeadMeanTable> {
        let s: StoredMeans = self.get("means", key)?;
        Some(HeadMeanTable {
            task: s.task,
            n_prompts: s.n_prompts,
            means: s
                .means
                .into_iter()
                .map(|l| l.into_iter().map(|h| h.into_iter().map(f32::from_bits).collect()).collect())
                .collect(),
        })
    }

    pub fn put_means(&self, key: &str, t: &HeadMeanTable) -> Result<()> {
        let stored = StoredMeans {
            task: t.task.clone(),
            n_prompts: t.n_prompts,
            means: t
                .means
                .iter()
                .map(|l| l.iter().map(|h| h.iter().map(|v| v.to_bits()).collect()).collect())
                .collect(),
        };
        self.put("means", key, &stored)
    }

    pub fn get_cie(&self, key: &str) -> Option<CieTable> {
        let s: StoredCie = self.get("cie", key)?;
        Some(CieTable {
            task: s.task,
            trials: s.trials,
            cie: s.cie.into_iter().map(|r| r.into_iter().map(f64::from_bits).collect()).collect(),
        })
    }

    pub fn put_cie(&self, key: &str, t: &CieTable) -> Result<()> {
        let stored = StoredCie {
            task: t.task.clone(),
            trials: t.trials,
            cie: t.cie.iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect(),
        };
        self.put("cie", key, &stored)
    }
}
