//! Small shared numeric helpers: seeded portable RNG streams and percentiles.
//!
//! All resampling in the crate flows through [`seeded_rng`] so that a run
//! configuration's single seed fully determines every draw, independent of
//! platform and thread schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The only generator the crate uses. Named in run configs as `"chacha8"`.
pub const RNG_NAME: &str = "chacha8";

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a sub-stream seed from a base seed and a purpose label (FNV-1a).
/// Stable across platforms and releases; keeps independent components from
/// sharing a stream.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in base.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Linear-interpolated percentile of a sorted slice (R type 7).
/// `q` in `[0, 1]`. Panics on an empty slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
