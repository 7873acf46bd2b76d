use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    Config(String),

    #[error("weights do not match config: {0}")]
    Weights(String),

    #[error("sequence of length {len} exceeds context length {context_len}")]
    Length { len: usize, context_len: usize },

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenId { id: u32, vocab_size: usize },

    #[error("out-of-vocabulary words: {0:?}")]
    Oov(Vec<String>),

    #[error("weight file format error: {0}")]
    Format(String),

    #[error("truncated tensor data for `{name}`: expected {expected} bytes, found {found}")]
    Truncated {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid intervention: {0}")]
    Intervention(String),

    #[error("task error: {0}")]
    Task(String),

    #[error("prompt construction error: {0}")]
    Prompt(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("training diverged at step {step} (lr {lr}): loss is {loss}")]
    Diverged { step: usize, lr: f32, loss: f32 },

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("bucket error: {0}")]
    Bucket(String),

    #[error("every token is masked out of the head set")]
    DegenerateMask,

    #[error("metric error: {0}")]
    Metric(String),

    #[error("steering error: {0}")]
    Steering(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
