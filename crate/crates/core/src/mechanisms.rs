//! Laplace noise, candidate grids, and the exponential mechanism.

use serde::{Deserialize, Serialize};

use crate::error::{capacity, invalid, Result};
use crate::graph_models::BlockMatrix;
use crate::linalg::Matrix;
use crate::rng::{self, Rng};

/// Default cap on the number of grid candidates.
pub const GRID_CAP: usize = 1_000_000;

/// Laplace sample by inverse CDF of a single uniform draw.
pub fn laplace(scale: f64, rng: &mut Rng) -> f64 {
    laplace_from_uniform(scale, rng::open_unit_f64(rng))
}

/// Inverse CDF of `Lap(scale)` at `u ∈ (0, 1)`.
pub fn laplace_from_uniform(scale: f64, u: f64) -> f64 {
    assert!(scale > 0.0, "Laplace scale must be positive");
    let c = u - 0.5;
    -scale * c.signum() * (1.0 - 2.0 * c.abs()).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientMode {
    /// `ε / (2Δ)`: the standard analysis gives ε-DP exactly.
    #[default]
    Strict,
    /// `ε / Δ`: as written in the algorithm box; 2ε-DP under the standard analysis.
    Paper,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub epsilon: f64,
    pub sensitivity: f64,
    pub mode: CoefficientMode,
    pub seed: u64,
}

impl MechanismConfig {
    pub fn new(epsilon: f64, sensitivity: f64, mode: CoefficientMode, seed: u64) -> Result<Self> {
        if !(epsilon > 0.0) || !(sensitivity > 0.0) {
            return invalid("epsilon and sensitivity must be positive");
        }
        Ok(MechanismConfig { epsilon, sensitivity, mode, seed })
    }

    pub fn coefficient(&self) -> f64 {
        match self.mode {
            CoefficientMode::Strict => self.epsilon / (2.0 * self.sensitivity),
            CoefficientMode::Paper => self.epsilon / self.sensitivity,
        }
    }
}

/// Symmetric `k × k` candidates with entries on `{0, η, 2η, …} ∩ [0, R]`.
#[derive(Clone, Debug)]
pub struct CandidateGrid {
    pub k: usize,
    pub bound: f64,
    pub step: f64,
    pub candidates: Vec<BlockMatrix>,
}

impl CandidateGrid {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Number of levels per entry, `⌊R/η⌋ + 1` (robust to `R/η` landing a hair below an integer).
pub fn levels(bound: f64, step: f64) -> usize {
    ((bound / step) * (1.0 + 1e-12)).floor() as usize + 1
}

pub fn grid_size(k: usize, bound: f64, step: f64) -> Option<usize> {
    let free = (k * (k + 1) / 2) as u32;
    levels(bound, step).checked_pow(free)
}

/// Full symmetric grid, optionally keeping only candidates whose entries
/// average to `1 ± η`.
pub fn build_grid(k: usize, bound: f64, step: f64, normalized_only: bool) -> Result<CandidateGrid> {
    if k == 0 || !(step > 0.0) || !(bound > 0.0) {
        return invalid("grid needs k ≥ 1, R > 0, η > 0");
    }
    let size = grid_size(k, bound, step).unwrap_or(usize::MAX);
    if size > GRID_CAP {
        return capacity("candidate grid size", size, GRID_CAP);
    }
    let lv = levels(bound, step);
    let free: Vec<(usize, usize)> = (0..k).flat_map(|i| (i..k).map(move |j| (i, j))).collect();
    let mut digits = vec![0usize; free.len()];
    let mut out = Vec::new();
    loop {
        let mut m = Matrix::zeros(k, k);
        for (&(i, j), &dgt) in free.iter().zip(&digits) {
            let v = (dgt as f64 * step).min(bound);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        let mean = m.sum() / (k * k) as f64;
        if !normalized_only || (mean - 1.0).abs() <= step + 1e-12 {
            out.push(BlockMatrix::new(m, bound)?);
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == digits.len() {
                return Ok(CandidateGrid { k, bound, step, candidates: out });
            }
            digits[pos] += 1;
            if digits[pos] < lv {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
    }
}

/// Output distribution `∝ exp(c · score)`, computed in log space.
pub fn exact_em_distribution(scores: &[f64], cfg: &MechanismConfig) -> Result<Vec<f64>> {
    Ok(log_em_distribution(scores, cfg)?.into_iter().map(f64::exp).collect())
}

/// Log-probabilities of the exponential mechanism.
pub fn log_em_distribution(scores: &[f64], cfg: &MechanismConfig) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return invalid("no candidates");
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return invalid("non-finite score");
    }
    let c = cfg.coefficient();
    let logits: Vec<f64> = scores.iter().map(|s| c * s).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|l| l - lse).collect())
}

/// Index drawn from the exponential mechanism over precomputed scores.
pub fn sample_index(scores: &[f64], cfg: &MechanismConfig, rng: &mut Rng) -> Result<usize> {
    let p = exact_em_distribution(scores, cfg)?;
    let u = rng::unit_f64(rng);
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return Ok(i);
        }
    }
    // u landed in the rounding slack at the top
    Ok(p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1))
}

#[derive(Clone, Debug)]
pub struct MechanismOutput {
    pub index: usize,
    pub choice: BlockMatrix,
    pub scores: Vec<f64>,
}

/// Scores every candidate, then samples one. Uses the mechanism stream of `cfg.seed`.
pub fn exponential_mechanism(
    grid: &CandidateGrid,
    score: &dyn Fn(&BlockMatrix) -> Result<f64>,
    cfg: &MechanismConfig,
) -> Result<MechanismOutput> {
    if grid.is_empty() {
        return invalid("candidate grid is empty");
    }
    let scores = grid.candidates.iter().map(score).collect::<Result<Vec<f64>>>()?;
    let mut r = rng::stream(cfg.seed, rng::streams::MECHANISM);
    let index = sample_index(&scores, cfg, &mut r)?;
    Ok(MechanismOutput { index, choice: grid.candidates[index].clone(), scores })
}

/// `max_i |log p_i − log q_i|` over candidates.
pub fn max_log_ratio(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p.iter().zip(log_q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
