//! Seed derivation helpers.
//!
//! Every randomized operation in this crate is a pure function of its inputs
//! and a `u64` seed. Sub-streams (per sample, per iteration, per class) are
//! derived with splitmix64 so that results never depend on call order and
//! resume/replay reproduces byte-identical streams.

use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// FNV-1a over raw bytes; stable across platforms and releases (unlike
/// `DefaultHasher`), so it is safe to bake into on-disk determinism.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive an independent sub-seed from a base seed and a stream label plus index.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(seed ^ stable_hash(label.as_bytes()) ^ splitmix64(index))
}

/// ChaCha stream for a derived seed.
pub fn derived_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label, index))
}
