//! Deterministic seed derivation.
//!
//! Every stochastic choice in a run draws from a stream derived as
//! `(master seed, label, indices...)`, so reordering or parallelising stages
//! never changes what any one stage samples. Runs are reproducible bit-for-bit
//! from `(config, seed)` alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over the label and indices, then SplitMix64 finalization.
pub fn derive_seed(master: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ master;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    for ix in indices {
        for b in ix.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    // SplitMix64 avalanche.
    h = h.wrapping_add(0x9e3779b97f4a7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// Seeded stream for one labelled purpose.
pub fn stream(master: u64, label: &str, indices: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, label, indices))
}
