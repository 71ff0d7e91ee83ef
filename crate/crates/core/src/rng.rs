//! Seeded random streams.
//!
//! A master seed fans out into independent, labelled streams so that changes in
//! one subsystem never perturb the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stream for `label` derived from `master`.
pub fn stream(master: u64, label: &str) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    Rng::from_seed(seed)
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
