//! Deterministic hashing and seeded RNG streams.
//!
//! Every random draw in the pipeline comes from a [`ChaCha8Rng`] stream derived
//! from `(seed, scope)` so that independent pipeline stages never share or
//! reorder draws. Scopes are plain strings like `"phantom/p0007"` or
//! `"pretrain/sagittal/step42"`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a byte slice. Used for content addressing and stream derivation.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Content hash of a byte stream, rendered as fixed-width hex.
pub fn content_hash(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

/// Derive a reproducible RNG stream for `(seed, scope)`.
pub fn stream(seed: u64, scope: &str) -> ChaCha8Rng {
    let mut key = seed.to_le_bytes().to_vec();
    key.extend_from_slice(scope.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&key))
}

/// One standard normal draw via Box-Muller. Kept local so the byte stream of
/// every artifact is pinned to this crate rather than a distribution crate.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fill a buffer with standard normal draws.
pub fn fill_standard_normal<R: Rng>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = standard_normal(rng);
    }
}
