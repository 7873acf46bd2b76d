//! Named seed streams.
//!
//! Randomness never comes from a global generator. Every consumer derives its
//! own stream from a base seed and a purpose label, so adding a new consumer
//! does not shift the draws of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive a child seed from `(seed, label)`.
pub fn derive(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// A generator for the stream `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label))
}
