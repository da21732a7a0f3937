//! Deterministic random-number plumbing.
//!
//! Every stochastic component (augmentation draws, parameter init, batch
//! shuffling, dropout masks, the synthetic corpus) pulls its own generator
//! from a single base seed through [`derive_seed`]. Sub-seeds are derived by
//! hashing `(base, tag, k)` with SHA-256, so adding a new consumer or
//! reordering work never perturbs the streams of existing consumers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a stable sub-seed from a base seed, a component tag, and an index.
pub fn derive_seed(base: u64, tag: &str, k: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(tag.as_bytes());
    hasher.update([0u8]);
    hasher.update(k.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Stable 64-bit hash of a string, for keying per-record streams by id.
pub fn hash_str(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// A ChaCha8 generator seeded from `derive_seed(base, tag, k)`.
pub fn rng_for(base: u64, tag: &str, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, k))
}
