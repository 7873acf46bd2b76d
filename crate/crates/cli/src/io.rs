//! Model directories, task loading and output bookkeeping.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use steerlab::model::{load_weights, save_weights, ModelConfig, ModelWeights, Transformer, Vocab};
use steerlab::tasks::{load_task, IclTask};

use crate::error::{CliError, Result};

pub const WEIGHTS_FILE: &str = "weights.stlb";
pub const MODEL_FILE: &str = "model.json";
pub const VOCAB_FILE: &str = "vocab.txt";

pub struct LoadedModel {
    pub model: Transformer,
    pub vocab: Vocab,
    /// First 12 hex digits of the weight file's SHA-256.
    pub id: String,
    pub weights_sha: String,
}

pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    let config_path = dir.join(MODEL_FILE);
    let text = std::fs::read_to_string(&config_path).map_err(|e| CliError::io(&config_path, e))?;
    let config: ModelConfig = serde_json::from_str(&text)?;
    let weights = load_weights(&dir.join(WEIGHTS_FILE))?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != config.vocab_size {
        return Err(CliError::Config(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let weights_sha = file_sha(&dir.join(WEIGHTS_FILE))?;
    Ok(LoadedModel {
        model: Transformer::new(config, weights)?,
        vocab,
        id: weights_sha[..12].to_string(),
        weights_sha,
    })
}

/// Load task files; unreadable or malformed tasks are configuration errors.
pub fn load_tasks(paths: &[PathBuf]) -> Result<Vec<IclTask>> {
    let tasks: Vec<IclTask> = paths
        .iter()
        .map(|p| load_task(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))))
        .collect::<Result<_>>()?;
    for (i, t) in tasks.iter().enumerate() {
        if tasks[..i].iter().any(|u| u.name == t.name) {
            return Err(CliError::Config(format!("duplicate task name `{}`", t.name)));
        }
    }
    Ok(tasks)
}

pub fn file_sha(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Files written by one command, relative to its output directory.
pub struct Outputs {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(path)
    }

    pub fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn save_model(&mut self, config: &ModelConfig, weights: &ModelWeights, vocab: &Vocab) -> Result<()> {
        let weights_path = self.dir.join(WEIGHTS_FILE);
        save_weights(weights, &weights_path)?;
        self.files.push(WEIGHTS_FILE.into());
        self.write_json(MODEL_FILE, config)?;
        let vocab_path = self.dir.join(VOCAB_FILE);
        vocab.save(&vocab_path)?;
        self.files.push(VOCAB_FILE.into());
        Ok(())
    }
}

/// Serialize rows with a header into CSV bytes.
pub fn csv_bytes<R: AsRef<[String]>>(header: &[&str], rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.as_ref())?;
    }
    w.into_inner().map_err(|e| CliError::io("<csv buffer>", e.into_error()))
}

/// Shortest round-trip form of a float, `""` for none.
pub fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}
