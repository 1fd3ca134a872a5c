//! Named, seedable, platform-independent random streams.
//!
//! Every stochastic step derives its own stream from the run seed and a label,
//! so adding or reordering steps never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derive a 64-bit sub-seed from a parent seed and a list of labels.
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn stream(seed: u64, labels: &[&str]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, labels))
}
