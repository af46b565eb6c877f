//! Seeded randomness.
//!
//! Every random draw in the crate comes from `ChaCha8Rng`. A master seed is
//! split into independent streams with [`stream`]; each logical consumer gets
//! its own stream id so adding draws in one place never shifts another.
//!
//! Edge coins use one stream per row: the pair `(i, j)` with `i < j` reads the
//! `(j - i - 1)`-th `u64` of row `i`'s stream. The outcome for a pair is
//! therefore a pure function of `(seed, i, j)`, whatever order rows are visited
//! in, and can be recomputed in isolation with [`pair_uniform`].

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids. Row streams for edge coins start at `EDGE_ROWS`.
pub mod streams {
    pub const LABELS: u64 = 1;
    pub const POSITIONS: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const MECHANISM: u64 = 4;
    pub const PARTITION: u64 = 5;
    pub const SOLVER: u64 = 6;
    pub const EDGE_ROWS: u64 = 1 << 32;
}

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Uniform in [0, 1) with 53 bits of precision.
#[inline]
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in the open interval (0, 1).
#[inline]
pub fn open_unit_f64(rng: &mut impl RngCore) -> f64 {
    loop {
        let u = unit_f64(rng);
        if u > 0.0 {
            return u;
        }
    }
}

/// Row stream used for the edge coins of vertex `i` against `j > i`.
pub fn edge_row(seed: u64, i: usize) -> Rng {
    stream(seed, streams::EDGE_ROWS + i as u64)
}

/// The uniform that decides pair `(i, j)`; identical to what the samplers draw.
pub fn pair_uniform(seed: u64, i: usize, j: usize) -> f64 {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    assert!(i != j, "no coin for the diagonal");
    let mut rng = edge_row(seed, i);
    // two 32-bit words per u64
    rng.set_word_pos(2 * (j - i - 1) as u128);
    unit_f64(&mut rng)
}

/// SplitMix64 finaliser; used to derive child seeds (per trial, per sweep point).
pub fn derive_seed(master: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fisher–Yates shuffle driven by our own uniform draws (stable across rand versions).
pub fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}

/// Unbiased integer in `0..bound` (Lemire's multiply-shift with rejection).
pub fn uniform_index(rng: &mut impl RngCore, bound: usize) -> usize {
    assert!(bound > 0);
    let bound = bound as u64;
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let m = (rng.next_u64() as u128) * (bound as u128);
        if (m as u64) >= threshold {
            return (m >> 64) as usize;
        }
    }
}
