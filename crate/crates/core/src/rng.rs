//! Seed fan-out.
//!
//! Every random stream in the engine (parameter init, dropout masks, epoch
//! shuffles, corpus synthesis, sampling, t-SNE init) is derived from a single
//! user seed plus a stable string tag. Streams are therefore independent of
//! each other: adding a parameter or a dropout layer never shifts the draws
//! of an unrelated one, which is what makes variant-toggle and degeneration
//! guarantees bit-exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn digest(seed: u64, tag: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.finalize().into()
}

/// Deterministic generator for `(seed, tag)`.
pub fn derive_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest(seed, tag))
}

/// Deterministic sub-seed for `(seed, tag)`, for APIs that take a plain seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let d = digest(seed, tag);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
