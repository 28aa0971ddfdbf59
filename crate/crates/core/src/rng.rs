//! Deterministic randomness: every stream is a ChaCha8 generator seeded by
//! hashing a base seed with a string label, so independent streams never
//! alias and runs replay bit-for-bit on a given platform.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a. Used for seed derivation, artifact checksums, and config
/// hashes throughout the crate.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut buf = Vec::with_capacity(8 + label.len());
    buf.extend_from_slice(&base.to_le_bytes());
    buf.extend_from_slice(label.as_bytes());
    fnv1a64(&buf)
}

/// Derives a child seed from a base seed, a label, and an index.
pub fn derive_seed_n(base: u64, label: &str, n: u64) -> u64 {
    derive_seed(derive_seed(base, label), &n.to_string())
}

/// A seeded generator for the given stream.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Standard normal via Box-Muller; self-contained so the byte stream of a
/// run never depends on a distribution crate's internals.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let mut u1 = rng.random::<f64>();
    if u1 < 1e-300 {
        u1 = 1e-300;
    }
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    if items.is_empty() {
        return;
    }
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
