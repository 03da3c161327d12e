//! Labeled seed derivation.
//!
//! Every random stream in the crate is derived from one root seed plus a
//! purpose label and a path of integer coordinates (round, domain, epoch, ...).
//! Adding a new consumer with a fresh label never perturbs existing streams.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Hashes `(root, label, path)` into a 64-bit seed.
pub fn derive_seed(root: u64, label: &str, path: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for p in path {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// A ChaCha20 generator seeded from [`derive_seed`].
pub fn stream(root: u64, label: &str, path: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(root, label, path))
}

/// Maps 64 random bits to the open interval (0, 1).
pub(crate) fn open_unit(bits: u64) -> f64 {
    // 52 bits, offset by half a step so neither 0 nor 1 is produced.
    ((bits >> 12) as f64 + 0.5) / (1u64 << 52) as f64
}
