//! Counter-based RNG streams.
//!
//! Every stochastic component draws from a ChaCha8 stream seeded by hashing
//! a root seed with a fixed tag path (e.g. `[TAG_MASK_SAMPLE, epoch,
//! example_index, mc_index]`). Parallel and serial evaluation orders
//! therefore produce bit-identical results, and reruns with the same seed
//! reproduce every draw exactly.
//!
//! Primitive draws (uniform f64, bounded integers, normals) are implemented
//! directly on top of the raw u64 output so results do not depend on
//! distribution code in external crates.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub const TAG_POLICY_INIT: u64 = 1;
pub const TAG_SFT_SHUFFLE: u64 = 2;
pub const TAG_RKTO_SHUFFLE: u64 = 3;
pub const TAG_MASK_SAMPLE: u64 = 4;
pub const TAG_EVAL_SAMPLE: u64 = 5;
pub const TAG_GEN_CONTEXT: u64 = 6;
pub const TAG_GEN_TRACE: u64 = 7;
pub const TAG_GEN_CORRUPT: u64 = 8;
pub const TAG_GEN_TEACHER: u64 = 9;
pub const TAG_GEN_PROJECTION: u64 = 10;
pub const TAG_GEN_LABELS: u64 = 11;
pub const TAG_GEN_ORDER: u64 = 12;
pub const TAG_SPLIT: u64 = 13;
pub const TAG_EMBED_ROW: u64 = 14;
pub const TAG_BOOTSTRAP: u64 = 15;
pub const TAG_STRATIFIED: u64 = 16;

/// SplitMix64 finalizer; mixes a 64-bit value into an avalanche hash.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed and a tag path.
pub fn stream_seed(root: u64, tags: &[u64]) -> u64 {
    let mut acc = mix64(root ^ 0x5851_f42d_4c95_7f2d);
    for &t in tags {
        acc = mix64(acc ^ mix64(t));
    }
    acc
}

/// A ChaCha8 generator for the stream identified by `(root, tags)`.
pub fn stream_rng(root: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(root, tags))
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn uniform_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Unbiased uniform draw in `[0, n)` by rejection.
pub fn uniform_index(rng: &mut impl RngCore, n: usize) -> usize {
    assert!(n > 0, "uniform_index over empty range");
    let n64 = n as u64;
    let limit = u64::MAX - (u64::MAX % n64);
    loop {
        let x = rng.next_u64();
        if x < limit {
            return (x % n64) as usize;
        }
    }
}

/// Standard normal via Box-Muller on two uniform draws.
pub fn standard_normal(rng: &mut impl RngCore) -> f64 {
    loop {
        let u1 = uniform_f64(rng);
        if u1 > 0.0 {
            let u2 = uniform_f64(rng);
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

pub fn fill_standard_normal(rng: &mut impl RngCore, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = standard_normal(rng);
    }
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}

/// Samples an index from a normalized probability vector by inverse CDF.
pub fn draw_categorical(rng: &mut impl RngCore, probs: &[f64]) -> usize {
    let u = uniform_f64(rng);
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}
