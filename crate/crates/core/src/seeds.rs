//! Deterministic seed derivation.
//!
//! A run has one root seed; every consumer of randomness (data generation,
//! parameter init, batch shuffling) draws from its own named stream so that
//! adding or reordering consumers never perturbs the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a per-stream seed from the root seed and a stream name using the
/// FNV-1a hash.
pub fn stream_seed(root: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    for b in root.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG for a named stream under the given root seed.
pub fn stream_rng(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(root, name))
}
