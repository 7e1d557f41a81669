//! Stage seeds derived from a single root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stable per-stage seed: first 8 bytes (LE) of SHA-256(root LE ‖ stage).
pub fn derive_seed(root: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn stage_rng(root: u64, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stage))
}
