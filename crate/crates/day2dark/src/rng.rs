//! Seeded randomness helpers.
//!
//! Everything stochastic in this crate flows through a `ChaCha8Rng` so that a
//! `(seed, call order)` pair fully determines the output, which is what the
//! reproducibility tests assert.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Construct the crate-standard RNG from a seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and a stream tag, so that
/// e.g. per-clip generators do not share state.
pub fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    // SplitMix64-style mixing of the tag into the seed.
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Standard normal sample via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
