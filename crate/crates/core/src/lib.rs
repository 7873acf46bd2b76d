//! A desk-scale laboratory for inference-time steering of language models.
//!
//! The crate bundles a small deterministic transformer engine with the
//! machinery needed to study three steering methods on it: contrastive
//! decoding across layers ([`dola`]), function vectors and task vectors
//! ([`steering`]), plus the logit lens ([`logitlens`]) and the evaluation
//! metrics ([`metrics`]) used to score them.

pub mod dola;
pub mod error;
pub mod linalg;
pub mod logitlens;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod steering;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
