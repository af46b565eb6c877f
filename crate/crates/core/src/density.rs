//! Private edge-density estimates.
//!
//! Three estimators, all returning a [`DensityEstimate`]:
//! a one-shot Laplace estimate of the empirical density, a degree-bounded
//! estimate built on the Lipschitz-extended edge count with median boosting,
//! and the two-stage estimator that uses the first to pick the degree bound
//! for the second.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph_models::{empirical_density, LabeledGraph};
use crate::lp::bounded_degree_edge_mass;
use crate::mechanisms::laplace;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityStage {
    Coarse,
    Fine,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    /// Estimate clamped to `[0, 1]`.
    pub value: f64,
    pub unclamped: f64,
    pub stage: DensityStage,
    /// Budget allocated to this estimate (the amount accounted for privacy).
    pub epsilon: f64,
    /// Budget actually consumed by noise draws; never above `epsilon`.
    pub epsilon_spent: f64,
    pub degree_bound: Option<f64>,
    /// Per-round noisy estimates of the degree-bounded estimator.
    pub rounds: Vec<f64>,
    /// Coarse estimate `ρ̂_c` and its upward-shifted version `ρ̂_u` (two-stage only).
    pub coarse: Option<f64>,
    pub coarse_upper: Option<f64>,
    pub flags: Vec<String>,
}

impl DensityEstimate {
    fn new(raw: f64, stage: DensityStage, epsilon: f64) -> Self {
        DensityEstimate {
            value: raw.clamp(0.0, 1.0),
            unclamped: raw,
            stage,
            epsilon,
            epsilon_spent: epsilon,
            degree_bound: None,
            rounds: Vec::new(),
            coarse: None,
            coarse_upper: None,
            flags: Vec::new(),
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return invalid("epsilon must be positive");
    }
    Ok(())
}

/// Natural log of `n`, floored at 1 so tiny graphs keep a sane round count.
fn log_n(n: usize) -> f64 {
    (n as f64).ln().max(1.0)
}

/// `ρ(G) + Lap(10 / (nε))`. An infinite `eps` gives `ρ(G)`.
pub fn coarse_private_density(g: &LabeledGraph, eps: f64, rng: &mut Rng) -> Result<DensityEstimate> {
    check_eps(eps)?;
    let rho = empirical_density(g);
    let scale = 10.0 / (g.n().max(1) as f64 * eps);
    let noise = if scale > 0.0 { laplace(scale, rng) } else { 0.0 };
    Ok(DensityEstimate::new(rho + noise, DensityStage::Coarse, eps))
}

/// Lipschitz-extended edge count: the largest `Σ_{i<j} C_ij` over symmetric
/// `0 ≤ C ≤ A` with row sums at most `d`. Equals `|E|` when the maximum
/// degree is at most `d`.
pub fn extended_edge_count(g: &LabeledGraph, d: f64) -> f64 {
    if g.degrees().into_iter().all(|x| x as f64 <= d) {
        return g.edge_count() as f64;
    }
    bounded_degree_edge_mass(g.adjacency_lists(), d)
}

/// Median of `⌈ln n⌉` rounds, each the extended edge count over `n(n−1)/2`
/// plus `Lap(4D / (ε′ n(n−1)))` with `ε′ = ε / (10 ln n)`. Even round counts
/// take the lower median.
pub fn bounded_degree_private_density(g: &LabeledGraph, d: f64, eps: f64, rng: &mut Rng) -> Result<DensityEstimate> {
    check_eps(eps)?;
    if !(d >= 1.0) {
        return invalid("degree bound must be at least 1");
    }
    let n = g.n();
    let pairs = (n as f64) * (n as f64 - 1.0) / 2.0;
    let ln = log_n(n);
    let rounds = ((n as f64).ln().ceil() as usize).max(1);
    let per_round = eps / (10.0 * ln);
    let base = if pairs > 0.0 { extended_edge_count(g, d) / pairs } else { 0.0 };
    let scale = if pairs > 0.0 { 2.0 * d / (per_round * pairs) } else { 0.0 };
    // independent substreams per round, keyed by one draw from the caller's rng
    let round_seed = rng.next_u64();
    let mut estimates: Vec<f64> = (0..rounds)
        .map(|r| {
            let mut rr = rng::stream(round_seed, r as u64);
            base + if scale > 0.0 && scale.is_finite() { laplace(scale, &mut rr) } else { 0.0 }
        })
        .collect();
    let rounds_out = estimates.clone();
    estimates.sort_by(f64::total_cmp);
    let median = estimates[(rounds - 1) / 2];
    let mut est = DensityEstimate::new(median, DensityStage::Fine, eps);
    est.epsilon_spent = (rounds as f64 * per_round).min(eps);
    est.degree_bound = Some(d);
    est.rounds = rounds_out;
    Ok(est)
}

/// Two-stage estimate: `ε/2` on the coarse estimate, then `ε/2` on the
/// degree-bounded estimate with `D = 10 R ρ̂_u n ln n`, `ρ̂_u = ρ̂_c + 100 ln n / (nε)`.
/// `D` is clamped to `[1, n − 1]`; a non-positive `ρ̂_u` skips stage two and
/// returns `max(ρ̂_c, 1/n²)`. Both events are flagged.
pub fn target_density_estimator(g: &LabeledGraph, eps: f64, r: f64, rng: &mut Rng) -> Result<DensityEstimate> {
    check_eps(eps)?;
    if !(r >= 1.0) {
        return invalid("R must be at least 1");
    }
    let n = g.n();
    let nf = n.max(1) as f64;
    let ln = log_n(n);
    let coarse = coarse_private_density(g, eps / 2.0, rng)?;
    let rho_c = coarse.unclamped;
    let rho_u = rho_c + 100.0 * ln / (nf * eps);
    let mut flags = Vec::new();
    if !(rho_u > 0.0) {
        let mut est = DensityEstimate::new(rho_c.max(1.0 / (nf * nf)), DensityStage::Target, eps);
        est.epsilon_spent = coarse.epsilon_spent;
        est.coarse = Some(rho_c);
        est.coarse_upper = Some(rho_u);
        est.flags.push("nonpositive_upper_estimate".into());
        return Ok(est);
    }
    let mut d = 10.0 * r * rho_u * nf * ln;
    let max_d = (n.max(2) - 1) as f64;
    if d > max_d {
        d = max_d;
        flags.push("degree_bound_clamped".into());
    }
    if d < 1.0 {
        d = 1.0;
        flags.push("degree_bound_raised".into());
    }
    let fine = bounded_degree_private_density(g, d, eps / 2.0, rng)?;
    let mut est = DensityEstimate::new(fine.unclamped, DensityStage::Target, eps);
    est.epsilon_spent = coarse.epsilon_spent + fine.epsilon_spent;
    est.degree_bound = Some(d);
    est.rounds = fine.rounds;
    est.coarse = Some(rho_c);
    est.coarse_upper = Some(rho_u);
    est.flags = flags;
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_models::{sample_sbm, BlockMatrix};

    fn cycle(n: usize) -> LabeledGraph {
        LabeledGraph::from_edges(n, (0..n).map(|i| (i, (i + 1) % n))).unwrap()
    }

    #[test]
    fn zero_noise_limits() {
        let g = cycle(10);
        let rho = empirical_density(&g);
        let mut r = rng::stream(1, 0);
        assert_eq!(coarse_private_density(&g, f64::INFINITY, &mut r).unwrap().value, rho);
        let fine = bounded_degree_private_density(&g, 2.0, f64::INFINITY, &mut r).unwrap();
        assert!((fine.value - rho).abs() < 1e-15);
        let t = target_density_estimator(&g, f64::INFINITY, 1.0, &mut r).unwrap();
        assert!((t.value - rho).abs() < 1e-15);
    }

    #[test]
    fn extension_matches_count_below_bound() {
        let b = BlockMatrix::from_rows(vec![vec![1.5, 0.5], vec![0.5, 1.5]], 2.0).unwrap();
        let g = sample_sbm(&b, 6.0, 200, 3).unwrap();
        let dmax = *g.degrees().iter().max().unwrap() as f64;
        assert_eq!(extended_edge_count(&g, dmax), g.edge_count() as f64);
        assert_eq!(bounded_degree_edge_mass(g.adjacency_lists(), dmax), g.edge_count() as f64);
        assert!(extended_edge_count(&g, 2.0) <= g.n() as f64);
    }

    #[test]
    fn coarse_noise_variance() {
        let g = cycle(50);
        let rho = empirical_density(&g);
        let eps = 1.0;
        let b = 10.0 / (50.0 * eps);
        let mut r = rng::stream(7, 0);
        let trials = 10_000;
        let mse: f64 = (0..trials).map(|_| (coarse_private_density(&g, eps, &mut r).unwrap().unclamped - rho).powi(2)).sum::<f64>() / trials as f64;
        assert!((mse / (2.0 * b * b) - 1.0).abs() < 0.1, "mse {mse}");
    }

    #[test]
    fn budgets_and_rounds() {
        let g = cycle(100);
        let mut r = rng::stream(2, 0);
        let f = bounded_degree_private_density(&g, 3.0, 1.0, &mut r).unwrap();
        assert_eq!(f.rounds.len(), 5); // ⌈ln 100⌉
        assert!(f.epsilon_spent <= f.epsilon);
        let mut sorted = f.rounds.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(f.unclamped, sorted[2]);
        let t = target_density_estimator(&g, 2.0, 4.0, &mut r).unwrap();
        assert_eq!(t.epsilon, 2.0);
        assert!(t.flags.iter().any(|f| f == "degree_bound_clamped"));
        assert_eq!(t.degree_bound, Some(99.0));
    }

    #[test]
    fn replay_is_deterministic() {
        let g = cycle(30);
        let a = target_density_estimator(&g, 1.0, 2.0, &mut rng::stream(5, 3)).unwrap();
        let b = target_density_estimator(&g, 1.0, 2.0, &mut rng::stream(5, 3)).unwrap();
        assert_eq!(a, b);
    }
}
