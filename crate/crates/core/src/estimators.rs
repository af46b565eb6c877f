//! End-to-end estimators.
//!
//! * [`private_sbm_estimate`] / [`private_graphon_estimate`]: private density
//!   estimate, then the exponential mechanism over a grid of block matrices.
//! * [`nonprivate_spectral_estimate`]: rank-`k` truncation plus balanced k-means.
//! * [`subsample_aggregate_estimate`]: spectral estimates on disjoint vertex
//!   parts, aggregated privately with a counting score.
//! * [`robust_density_estimate`] / [`robust_sbm_estimate`]: node-robust
//!   estimates that tolerate an adversarially chosen vertex fraction.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::density::{target_density_estimator, DensityEstimate};
use crate::error::{invalid, Error, Result};
use crate::graph_models::{
    empirical_density, prune_high_degree, BlockGraphon, BlockMatrix, CommunityMembership, LabeledGraph,
};
use crate::linalg::{balanced_kmeans, top_abs_eig, Matrix};
use crate::mechanisms::{build_grid, exponential_mechanism, CandidateGrid, CoefficientMode, MechanismConfig};
use crate::metrics::{delta2_sq, BirkhoffOptions};
use crate::poly::{Monomial, Polynomial};
use crate::rng::{self, derive_seed, streams};
use crate::scoring::{
    block_sums, lipschitz_score, relaxed_score, row_sum_cap, ConstraintKind, ConstraintSystem, Equipartitions, Origin,
    RelaxedOptions,
};
use crate::sdp;

pub const SCHEMA_VERSION: &str = "v1";
/// Largest `n` scored exactly (Lipschitz extension by enumeration) in `auto` mode.
pub const LIPSCHITZ_MAX_N: usize = 12;
/// Largest `n` for the exhaustive robust-density search.
pub const ROBUST_DENSITY_EXACT_MAX_N: usize = 16;
/// Largest `n` for the exhaustive robust SBM program.
pub const ROBUST_SBM_EXACT_MAX_N: usize = 12;
/// Number of labellings kept by the spectral-surrogate scorer.
const SURROGATE_CANDIDATES: usize = 4;

/// How the exponential mechanism scores a candidate block matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerMode {
    /// Lipschitz for `n ≤ 12`, spectral surrogate beyond.
    #[default]
    Auto,
    /// Unextended objective; not private (kept for diagnostics).
    Ideal,
    Lipschitz,
    Relaxed,
    SpectralSurrogate,
}

impl ScorerMode {
    pub fn resolve(self, n: usize) -> ScorerMode {
        match self {
            ScorerMode::Auto if n <= LIPSCHITZ_MAX_N => ScorerMode::Lipschitz,
            ScorerMode::Auto => ScorerMode::SpectralSurrogate,
            m => m,
        }
    }
}

impl fmt::Display for ScorerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScorerMode::Auto => "auto",
            ScorerMode::Ideal => "ideal",
            ScorerMode::Lipschitz => "lipschitz",
            ScorerMode::Relaxed => "relaxed",
            ScorerMode::SpectralSurrogate => "spectral-surrogate",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ScorerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "auto" => ScorerMode::Auto,
            "ideal" => ScorerMode::Ideal,
            "lipschitz" => ScorerMode::Lipschitz,
            "relaxed" => ScorerMode::Relaxed,
            "spectral-surrogate" | "spectral_surrogate" | "surrogate" => ScorerMode::SpectralSurrogate,
            other => return invalid(format!("unknown scorer mode '{other}'")),
        })
    }
}

/// What the privacy claim of a report rests on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyLabel {
    /// Covered by the sensitivity bound of a data-independent score.
    Certified,
    /// Only checked by the audit suite (data-dependent candidates or doubled coefficient).
    Empirical,
    /// Not a private estimator.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivateConfig {
    /// Grid step `η`; `None` means `R / 8`.
    pub step: Option<f64>,
    /// Keep only candidates whose mean entry is `1 ± η`.
    pub normalized_only: bool,
    pub scorer: ScorerMode,
    pub coefficient: CoefficientMode,
    pub relaxed: RelaxedOptions,
    pub seed: u64,
}

impl PrivateConfig {
    pub fn sbm(seed: u64) -> Self {
        PrivateConfig {
            step: None,
            normalized_only: true,
            scorer: ScorerMode::Auto,
            coefficient: CoefficientMode::Strict,
            relaxed: RelaxedOptions::default(),
            seed,
        }
    }

    pub fn graphon(seed: u64) -> Self {
        PrivateConfig { normalized_only: false, ..Self::sbm(seed) }
    }

    pub fn step_for(&self, r: f64) -> f64 {
        self.step.unwrap_or(r / 8.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBudget {
    pub stage: String,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub step: f64,
    pub bound: f64,
    pub size: usize,
    pub normalized_only: bool,
    /// Utility penalty `ln |grid|` paid by the exponential mechanism.
    pub log_size: f64,
}

impl GridInfo {
    fn of(grid: &CandidateGrid, normalized_only: bool) -> Self {
        GridInfo {
            step: grid.step,
            bound: grid.bound,
            size: grid.len(),
            normalized_only,
            log_size: (grid.len() as f64).ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub schema: String,
    pub estimator: String,
    pub n: usize,
    pub k: usize,
    pub b_hat: BlockMatrix,
    pub z_hat: Option<Vec<usize>>,
    pub density: Option<DensityEstimate>,
    /// `δ₂²(B̂, B₀)` once a planted matrix is supplied.
    pub delta2_sq: Option<f64>,
    /// Declared total budget; equals the sum of `budgets`.
    pub epsilon: f64,
    pub budgets: Vec<StageBudget>,
    pub scorer: Option<ScorerMode>,
    pub privacy: PrivacyLabel,
    pub grid: Option<GridInfo>,
    pub sensitivity: Option<f64>,
    /// Index of the sampled candidate and its score.
    pub selected: Option<(usize, f64)>,
    pub seed: u64,
    pub flags: Vec<String>,
    /// Left empty unless the caller records timing, so reports stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl EstimateReport {
    fn nonprivate(estimator: &str, n: usize, b_hat: BlockMatrix, z_hat: Option<&CommunityMembership>, seed: u64) -> Self {
        EstimateReport {
            schema: SCHEMA_VERSION.into(),
            estimator: estimator.into(),
            n,
            k: b_hat.k(),
            b_hat,
            z_hat: z_hat.map(|z| z.labels().to_vec()),
            density: None,
            delta2_sq: None,
            epsilon: 0.0,
            budgets: Vec::new(),
            scorer: None,
            privacy: PrivacyLabel::None,
            grid: None,
            sensitivity: None,
            selected: None,
            seed,
            flags: Vec::new(),
            wall_clock_seconds: None,
        }
    }

    /// Fills `delta2_sq` against a planted matrix.
    pub fn with_truth(mut self, b0: &BlockMatrix) -> Result<Self> {
        self.delta2_sq = Some(delta2_sq(self.b_hat.entries(), b0.entries(), &BirkhoffOptions::default())?);
        Ok(self)
    }

    pub fn budget_total(&self) -> f64 {
        self.budgets.iter().map(|b| b.epsilon).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_common(g: &LabeledGraph, k: usize, eps: f64, r: f64) -> Result<()> {
    let n = g.n();
    if k == 0 || n == 0 || n % k != 0 {
        return invalid(format!("need k | n (n={n}, k={k})"));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return invalid("epsilon must be a positive real");
    }
    if !(r > 0.0) || !r.is_finite() {
        return invalid("entry bound R must be a positive real");
    }
    Ok(())
}

fn with_stage<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Capacity { .. } | Error::Solver(_) => Error::Solver(format!("{stage}: {e}")),
        other => other,
    })
}

// ---------------------------------------------------------------------------
// scorers

/// `max_Z ⟨S_Z, B⟩ − ½ (n/k)² ‖B‖²_F` over a fixed list of block-sum matrices.
struct BlockSumScorer {
    sums: Vec<Matrix>,
    m2: f64,
}

impl BlockSumScorer {
    fn score(&self, b: &BlockMatrix) -> f64 {
        let half = 0.5 * self.m2 * b.entries().frobenius_sq();
        self.sums.iter().map(|s| s.inner(b.entries())).fold(f64::NEG_INFINITY, f64::max) - half
    }
}

/// Block sums of `A / rho` for a labelling, straight from the edge lists.
fn edge_block_sums(g: &LabeledGraph, z: &CommunityMembership, rho: f64) -> Matrix {
    let k = z.k();
    let mut s = Matrix::zeros(k, k);
    for (i, j) in g.edges() {
        let (a, b) = (z.label(i), z.label(j));
        s[(a, b)] += 1.0 / rho;
        s[(b, a)] += 1.0 / rho;
    }
    s
}

/// Balanced spectral labellings of `g` from a few k-means seeds, deduplicated.
fn spectral_labellings(g: &LabeledGraph, k: usize, seed: u64, count: usize) -> Result<Vec<CommunityMembership>> {
    let eig = top_abs_eig(g, k, derive_seed(seed, streams::SOLVER))?;
    let n = g.n();
    let points = Matrix::from_fn(n, k, |i, j| eig.vectors[(i, j)] * eig.values[j]);
    let mut out: Vec<CommunityMembership> = Vec::new();
    for c in 0..count {
        let km = balanced_kmeans(&points, k, derive_seed(seed, 100 + c as u64))?;
        let z = CommunityMembership::new(km.labels, k)?;
        if !out.iter().any(|o| o.labels() == z.labels()) {
            out.push(z);
        }
    }
    Ok(out)
}

enum Scorer<'a> {
    Cached(BlockSumScorer),
    Lipschitz { yin: &'a Matrix, r: f64 },
    Relaxed { yin: &'a Matrix, r: f64, opts: &'a RelaxedOptions },
}

impl Scorer<'_> {
    fn score(&self, b: &BlockMatrix) -> Result<f64> {
        match self {
            Scorer::Cached(c) => Ok(c.score(b)),
            Scorer::Lipschitz { yin, r } => Ok(lipschitz_score(b, yin, *r)?.value),
            Scorer::Relaxed { yin, r, opts } => Ok(relaxed_score(b, yin, *r, opts)?.value),
        }
    }
}

/// With every row under the cap the extension is the plain objective, so
/// the block sums of all labellings can be cached.
fn lipschitz_scorer(yin: &Matrix, k: usize, r: f64) -> Result<Scorer<'_>> {
    let n = yin.rows();
    let cap = row_sum_cap(n, r);
    if (0..n).all(|i| yin.row(i).iter().all(|&v| v >= 0.0) && yin.row(i).iter().sum::<f64>() <= cap) {
        let m = (n / k) as f64;
        Ok(Scorer::Cached(BlockSumScorer { sums: enumerated_sums(yin, k)?, m2: m * m }))
    } else {
        Ok(Scorer::Lipschitz { yin, r })
    }
}

/// Lipschitz-extended scores of every grid candidate for `Y = A / rho`.
pub fn lipschitz_grid_scores(g: &LabeledGraph, rho: f64, r: f64, grid: &CandidateGrid) -> Result<Vec<f64>> {
    if !(rho > 0.0) {
        return invalid("rho must be positive");
    }
    let yin = g.adjacency_matrix().scale(1.0 / rho);
    let scorer = lipschitz_scorer(&yin, grid.k, r)?;
    grid.candidates.iter().map(|b| scorer.score(b)).collect()
}

/// All-equipartition block sums of `yin`.
fn enumerated_sums(yin: &Matrix, k: usize) -> Result<Vec<Matrix>> {
    Ok(Equipartitions::new(yin.rows(), k)?.map(|z| block_sums(&z, yin)).collect())
}

// ---------------------------------------------------------------------------
// private estimation

/// Private SBM estimate: half the budget on the density, half on the
/// exponential mechanism with `Y = A / ρ̂` and sensitivity `40 n R²`.
pub fn private_sbm_estimate(g: &LabeledGraph, k: usize, eps: f64, r: f64, cfg: &PrivateConfig) -> Result<EstimateReport> {
    check_common(g, k, eps, r)?;
    let n = g.n();
    let mut flags = Vec::new();

    let mut noise = rng::stream(cfg.seed, streams::NOISE);
    let density = with_stage("density stage", target_density_estimator(g, eps / 2.0, r, &mut noise))?;
    let floor = 1.0 / (n as f64 * n as f64);
    let rho = if density.value < floor {
        flags.push("density_floored".to_string());
        floor
    } else {
        density.value
    };

    let step = cfg.step_for(r);
    let grid = with_stage("mechanism stage", build_grid(k, r, step, cfg.normalized_only))?;
    if grid.is_empty() {
        return invalid("candidate grid is empty; refine the step or disable normalized-only");
    }
    let sensitivity = 40.0 * n as f64 * r * r;
    let mech = MechanismConfig::new(eps / 2.0, sensitivity, cfg.coefficient, cfg.seed)?;

    let mode = cfg.scorer.resolve(n);
    let m = (n / k) as f64;
    let dense;
    let scorer = match mode {
        ScorerMode::SpectralSurrogate => {
            flags.push("spectral_surrogate_scorer".to_string());
            let zs = with_stage("surrogate labelling", spectral_labellings(g, k, cfg.seed, SURROGATE_CANDIDATES))?;
            Scorer::Cached(BlockSumScorer { sums: zs.iter().map(|z| edge_block_sums(g, z, rho)).collect(), m2: m * m })
        }
        ScorerMode::Ideal => {
            dense = g.adjacency_matrix().scale(1.0 / rho);
            Scorer::Cached(BlockSumScorer { sums: with_stage("ideal scorer", enumerated_sums(&dense, k))?, m2: m * m })
        }
        ScorerMode::Lipschitz => {
            dense = g.adjacency_matrix().scale(1.0 / rho);
            with_stage("lipschitz scorer", lipschitz_scorer(&dense, k, r))?
        }
        ScorerMode::Relaxed => {
            dense = g.adjacency_matrix().scale(1.0 / rho);
            Scorer::Relaxed { yin: &dense, r, opts: &cfg.relaxed }
        }
        ScorerMode::Auto => unreachable!("resolved above"),
    };
    let out = with_stage("mechanism stage", exponential_mechanism(&grid, &|b| scorer.score(b), &mech))?;

    let privacy = match (mode, cfg.coefficient) {
        (ScorerMode::Ideal, _) => PrivacyLabel::None,
        (ScorerMode::SpectralSurrogate, _) | (_, CoefficientMode::Paper) => PrivacyLabel::Empirical,
        _ => PrivacyLabel::Certified,
    };
    if cfg.coefficient == CoefficientMode::Paper {
        flags.push("coefficient_eps_over_sensitivity".to_string());
    }
    flags.extend(density.flags.iter().cloned());

    Ok(EstimateReport {
        schema: SCHEMA_VERSION.into(),
        estimator: "private-sbm".into(),
        n,
        k,
        b_hat: out.choice,
        z_hat: None,
        density: Some(density),
        delta2_sq: None,
        epsilon: eps,
        budgets: vec![
            StageBudget { stage: "density".into(), epsilon: eps / 2.0 },
            StageBudget { stage: "mechanism".into(), epsilon: eps / 2.0 },
        ],
        scorer: Some(mode),
        privacy,
        grid: Some(GridInfo::of(&grid, cfg.normalized_only)),
        sensitivity: Some(sensitivity),
        selected: Some((out.index, out.scores[out.index])),
        seed: cfg.seed,
        flags,
        wall_clock_seconds: None,
    })
}

/// Same pipeline, reported as the block graphon `W[B̂]`.
pub fn private_graphon_estimate(
    g: &LabeledGraph,
    k: usize,
    eps: f64,
    r: f64,
    cfg: &PrivateConfig,
) -> Result<(BlockGraphon, EstimateReport)> {
    let mut report = private_sbm_estimate(g, k, eps, r, cfg)?;
    report.estimator = "private-graphon".into();
    Ok((BlockGraphon::new(report.b_hat.clone()), report))
}

// ---------------------------------------------------------------------------
// non-private spectral estimate

/// Rank-`k` truncation `Q̂` of the adjacency, balanced k-means on its rows,
/// and `B̂ = (k²/n²) Ẑᵀ Q̃ Ẑ` with `Q̃ = Q̂ / ρ̂` (negative entries clamped to 0).
pub fn nonprivate_spectral_estimate(g: &LabeledGraph, k: usize, seed: u64) -> Result<(BlockMatrix, CommunityMembership)> {
    let n = g.n();
    if k == 0 || k > n {
        return invalid(format!("need 1 ≤ k ≤ n (n={n}, k={k})"));
    }
    if n % k != 0 {
        return invalid(format!("balanced rounding needs k | n (n={n}, k={k})"));
    }
    let eig = top_abs_eig(g, k, derive_seed(seed, streams::SOLVER))?;
    let points = Matrix::from_fn(n, k, |i, j| eig.vectors[(i, j)] * eig.values[j]);
    let km = balanced_kmeans(&points, k, seed)?;
    let z = CommunityMembership::new(km.labels, k)?;

    // Σ_{i∈a, j∈b} Q̂_ij = Σ_l λ_l (Σ_{i∈a} u_il)(Σ_{j∈b} u_jl)
    let mut col = Matrix::zeros(k, eig.values.len());
    for i in 0..n {
        for l in 0..eig.values.len() {
            col[(z.label(i), l)] += eig.vectors[(i, l)];
        }
    }
    let rho = empirical_density(g);
    let norm = (k * k) as f64 / (n as f64 * n as f64);
    let entries = Matrix::from_fn(k, k, |a, b| {
        if rho <= 0.0 {
            return 0.0;
        }
        let s: f64 = eig.values.iter().enumerate().map(|(l, lam)| lam * col[(a, l)] * col[(b, l)]).sum();
        (norm * s / rho).max(0.0)
    });
    let sym = Matrix::from_fn(k, k, |a, b| 0.5 * (entries[(a, b)] + entries[(b, a)]));
    let bound = sym.max().max(1.0);
    Ok((BlockMatrix::new(sym, bound)?, z))
}

pub fn nonprivate_spectral_report(g: &LabeledGraph, k: usize, seed: u64) -> Result<EstimateReport> {
    let (b, z) = nonprivate_spectral_estimate(g, k, seed)?;
    Ok(EstimateReport::nonprivate("spectral", g.n(), b, Some(&z), seed))
}

// ---------------------------------------------------------------------------
// subsample and aggregate

/// Number of parts `⌈k³ ln n / ε⌉`.
pub fn subsample_parts(n: usize, k: usize, eps: f64) -> usize {
    ((k as f64).powi(3) * (n.max(2) as f64).ln() / eps).ceil().max(1.0) as usize
}

/// Smallest `n` with `2k · parts(n) ≤ n`.
pub fn subsample_min_n(k: usize, eps: f64) -> usize {
    let fits = |n: usize| 2 * k * subsample_parts(n, k, eps) <= n;
    let mut hi = 2 * k;
    while !fits(hi) {
        hi *= 2;
    }
    let mut lo = hi / 2;
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Random partition into `⌈k³ ln n / ε⌉` parts, a spectral estimate per part,
/// then the exponential mechanism with `Score(B) = #{t : δ₂(B̂_t, B) ≤ τ}`
/// (sensitivity 1, weight `exp(+ε·Score/2)`).
pub fn subsample_aggregate_estimate(
    g: &LabeledGraph,
    k: usize,
    eps: f64,
    tau: f64,
    r: f64,
    cfg: &PrivateConfig,
) -> Result<EstimateReport> {
    let n = g.n();
    if k == 0 || !(eps > 0.0) || !eps.is_finite() || !(r > 0.0) {
        return invalid("need k ≥ 1, ε > 0, R > 0");
    }
    if !(tau >= 0.0) {
        return invalid("closeness threshold must be nonnegative");
    }
    let parts = subsample_parts(n, k, eps);
    if 2 * k * parts > n {
        return invalid(format!(
            "{parts} parts of a {n}-vertex graph leave fewer than 2k={} vertices each; need n ≥ {}",
            2 * k,
            subsample_min_n(k, eps)
        ));
    }
    let mut flags = Vec::new();
    let size = (n / parts) / k * k;
    if size * parts < n {
        flags.push(format!("unused_vertices={}", n - size * parts));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut order, &mut rng::stream(cfg.seed, streams::PARTITION));

    let mut estimates = Vec::with_capacity(parts);
    for t in 0..parts {
        let sub = g.induced_subgraph(&order[t * size..(t + 1) * size]);
        let (b, _) = with_stage("part estimate", nonprivate_spectral_estimate(&sub, k, derive_seed(cfg.seed, t as u64)))?;
        estimates.push(b);
    }

    let grid = build_grid(k, r, cfg.step_for(r), cfg.normalized_only)?;
    let opts = BirkhoffOptions::default();
    let score = |b: &BlockMatrix| -> Result<f64> {
        let mut count = 0usize;
        for e in &estimates {
            if delta2_sq(e.entries(), b.entries(), &opts)?.max(0.0).sqrt() <= tau {
                count += 1;
            }
        }
        Ok(count as f64)
    };
    // ε/(2·1) is exactly the ε/2 weight on the counting score
    let mech = MechanismConfig::new(eps, 1.0, CoefficientMode::Strict, cfg.seed)?;
    let out = exponential_mechanism(&grid, &score, &mech)?;
    flags.push(format!("parts={parts}"));
    flags.push(format!("part_size={size}"));

    Ok(EstimateReport {
        schema: SCHEMA_VERSION.into(),
        estimator: "subsample-aggregate".into(),
        n,
        k,
        b_hat: out.choice,
        z_hat: None,
        density: None,
        delta2_sq: None,
        epsilon: eps,
        budgets: vec![StageBudget { stage: "aggregation".into(), epsilon: eps }],
        scorer: None,
        privacy: PrivacyLabel::Certified,
        grid: Some(GridInfo::of(&grid, cfg.normalized_only)),
        sensitivity: Some(1.0),
        selected: Some((out.index, out.scores[out.index])),
        seed: cfg.seed,
        flags,
        wall_clock_seconds: None,
    })
}

// ---------------------------------------------------------------------------
// node-robust density

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustDensity {
    /// Best density found after removing at most `⌊ηn⌋` vertices (normalised by the original `n(n−1)`).
    pub value: f64,
    /// Vertices removed by that solution.
    pub removed: Vec<usize>,
    /// `true` when `value` is the exact minimum.
    pub exact: bool,
    /// Greedy (repeated max-degree removal) value; always ≥ `value`.
    pub greedy: f64,
    /// Lower bound from the level-2 moment relaxation, when it fits.
    pub relaxation_bound: Option<f64>,
}

fn removal_budget(n: usize, eta: f64) -> usize {
    ((eta * n as f64) + 1e-9).floor() as usize
}

/// `2 · #{edges avoiding `removed`} / (n(n−1))`.
fn remaining_density(g: &LabeledGraph, gone: &[bool]) -> f64 {
    let n = g.n() as f64;
    if g.n() < 2 {
        return 0.0;
    }
    let kept = g.edges().filter(|&(i, j)| !gone[i] && !gone[j]).count();
    2.0 * kept as f64 / (n * (n - 1.0))
}

/// Repeatedly drops a vertex of largest remaining degree (lowest index on ties).
pub fn greedy_removal(g: &LabeledGraph, budget: usize) -> Vec<usize> {
    let n = g.n();
    let mut gone = vec![false; n];
    let mut deg = g.degrees();
    let mut removed = Vec::new();
    for _ in 0..budget.min(n) {
        let Some(v) = (0..n).filter(|&v| !gone[v]).max_by(|&a, &b| deg[a].cmp(&deg[b]).then(b.cmp(&a))) else {
            break;
        };
        gone[v] = true;
        removed.push(v);
        for &u in g.neighbors(v) {
            if !gone[u as usize] {
                deg[u as usize] -= 1;
            }
        }
    }
    removed
}

/// Exhaustive minimum over removal sets of size exactly `budget` (removing
/// more never increases the density).
fn exact_removal(g: &LabeledGraph, budget: usize) -> (f64, Vec<usize>) {
    let n = g.n();
    let budget = budget.min(n);
    let mut idx: Vec<usize> = (0..budget).collect();
    let mut best = (f64::INFINITY, Vec::new());
    loop {
        let mut gone = vec![false; n];
        for &v in &idx {
            gone[v] = true;
        }
        let v = remaining_density(g, &gone);
        if v < best.0 - 1e-15 {
            best = (v, idx.clone());
        }
        // next combination
        let mut i = budget;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if idx[i] != i + n - budget {
                break;
            }
            if i == 0 && idx[0] == n - budget {
                return best;
            }
        }
        idx[i] += 1;
        for j in i + 1..budget {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Level-2 moment lower bound on the minimum remaining density, with boolean
/// removal indicators `x` summing to `budget`.
fn relaxation_lower_bound(g: &LabeledGraph, budget: usize, start: &[usize]) -> Result<Option<f64>> {
    let n = g.n();
    if n < 2 || g.edge_count() == 0 {
        return Ok(Some(0.0));
    }
    let names = (0..n).map(|i| format!("x_{i}")).collect();
    let mut cs = ConstraintSystem::new(names);
    for i in 0..n {
        let x = Polynomial::var(i);
        cs.push(ConstraintKind::Eq, Origin::Other, format!("boolean x_{i}"), x.mul(&x).sub(&x));
    }
    let total = Polynomial::from_terms((0..n).map(|i| (Monomial::var(i), 1.0)).chain([(Monomial::one(), -(budget as f64))]));
    cs.push(ConstraintKind::Eq, Origin::Other, "removal budget", total);
    for i in 0..n {
        cs.push(ConstraintKind::Ge, Origin::Other, format!("x_{i} ≥ 0"), Polynomial::var(i));
        cs.push(ConstraintKind::Ge, Origin::Other, format!("x_{i} ≤ 1"), Polynomial::constant(1.0).sub(&Polynomial::var(i)));
    }
    // maximise −density = −c Σ_edges (1 − x_i)(1 − x_j)
    let c = 2.0 / (n as f64 * (n as f64 - 1.0));
    let mut neg_density = Polynomial::zero();
    for (i, j) in g.edges() {
        let keep = Polynomial::constant(1.0).sub(&Polynomial::var(i)).mul(&Polynomial::constant(1.0).sub(&Polynomial::var(j)));
        neg_density = neg_density.sub(&keep.scale(c));
    }
    let objective_row = cs.constraints.len();
    cs.push(ConstraintKind::Ge, Origin::Objective, "objective", neg_density);

    let p = match sdp::build_moment_relaxation(&cs, 2) {
        Ok(p) => p,
        Err(Error::Capacity { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    if p.presolve_infeasible().is_some() {
        return Ok(None);
    }
    let Some(block) = p.block_index(objective_row) else {
        return Ok(None);
    };
    let mut x = vec![0.0; n];
    for &v in start {
        x[v] = 1.0;
    }
    let mv = p.point_mass(&x)?;
    Ok(sdp::maximize_scalar_block(&p, block, &mv, 1e-7, 1e-8)?.map(|m| (-(m.value + m.gap_bound)).max(0.0)))
}

/// Smallest edge density reachable by deleting at most `⌊ηn⌋` vertices.
/// Exact for `n ≤ 16`; otherwise greedy, bracketed below by a moment relaxation.
pub fn robust_density_estimate(g: &LabeledGraph, eta: f64) -> Result<RobustDensity> {
    if !(0.0..1.0).contains(&eta) {
        return invalid("η must lie in [0, 1)");
    }
    let n = g.n();
    let budget = removal_budget(n, eta);
    let greedy_set = greedy_removal(g, budget);
    let mut gone = vec![false; n];
    for &v in &greedy_set {
        gone[v] = true;
    }
    let greedy = remaining_density(g, &gone);
    let relaxation_bound = relaxation_lower_bound(g, budget, &greedy_set)?;
    if n <= ROBUST_DENSITY_EXACT_MAX_N {
        let (value, removed) = exact_removal(g, budget);
        return Ok(RobustDensity { value, removed, exact: true, greedy, relaxation_bound });
    }
    Ok(RobustDensity { value: greedy, removed: greedy_set, exact: false, greedy, relaxation_bound })
}

// ---------------------------------------------------------------------------
// node-robust SBM

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RobustMethod {
    /// Exhaustive over labellings with alternating minimisation in `(B, C)`.
    Enumeration,
    /// Pruned, scaled adjacency truncated to rank `k` and clamped to `[0, R]`.
    SpectralSurrogate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustEstimate {
    pub b_hat: BlockMatrix,
    pub z_hat: CommunityMembership,
    pub method: RobustMethod,
    /// Objective `Σ_{i≠j} ((n/d) C_ij − (Z B Zᵀ)_ij)²` of the enumerated solution.
    pub program_value: Option<f64>,
    pub flags: Vec<String>,
}

/// Closest symmetric `C` with `0 ≤ C ≤ A` and row sums `≤ cap` to `target`
/// (off-diagonal, edges only), by Dykstra's alternating projections.
fn project_weights(g: &LabeledGraph, target: &[(usize, usize, f64)], cap: f64) -> Vec<f64> {
    let mut c: Vec<f64> = target.iter().map(|&(_, _, t)| t.clamp(0.0, 1.0)).collect();
    let n = g.n();
    let row_sum = |c: &[f64]| {
        let mut s = vec![0.0; n];
        for (e, &(i, j, _)) in target.iter().enumerate() {
            s[i] += c[e];
            s[j] += c[e];
        }
        s
    };
    if row_sum(&c).iter().all(|&s| s <= cap + 1e-12) {
        return c;
    }
    let mut x: Vec<f64> = target.iter().map(|t| t.2).collect();
    let mut p_box = vec![0.0; c.len()];
    let mut p_rows = vec![vec![0.0; c.len()]; n];
    for _ in 0..500 {
        let before = x.clone();
        let y: Vec<f64> = x.iter().zip(&p_box).map(|(a, b)| a + b).collect();
        let boxed: Vec<f64> = y.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        p_box = y.iter().zip(&boxed).map(|(a, b)| a - b).collect();
        x = boxed;
        for v in 0..n {
            let y: Vec<f64> = x.iter().zip(&p_rows[v]).map(|(a, b)| a + b).collect();
            let inc: Vec<usize> = target.iter().enumerate().filter(|(_, t)| t.0 == v || t.1 == v).map(|(e, _)| e).collect();
            let s: f64 = inc.iter().map(|&e| y[e]).sum();
            let mut proj = y.clone();
            if s > cap && !inc.is_empty() {
                let shift = (s - cap) / inc.len() as f64;
                for &e in &inc {
                    proj[e] -= shift;
                }
            }
            p_rows[v] = y.iter().zip(&proj).map(|(a, b)| a - b).collect();
            x = proj;
        }
        let moved = x.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if moved < 1e-12 {
            break;
        }
    }
    c.copy_from_slice(&x);
    c.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    c
}

/// Best `(B, C)` for a fixed labelling; returns the objective and `B`.
fn fit_labelling(g: &LabeledGraph, z: &CommunityMembership, scale: f64, r: f64, cap: f64) -> (f64, Matrix) {
    let k = z.k();
    let m = z.block_size() as f64;
    let edges: Vec<(usize, usize)> = g.edges().collect();
    // off-diagonal pair counts per block pair (ordered pairs)
    let pairs = |a: usize, b: usize| if a == b { m * (m - 1.0) } else { m * m };
    let mut c = vec![1.0; edges.len()];
    let mut b = Matrix::zeros(k, k);
    let mut value = f64::INFINITY;
    for _ in 0..50 {
        // B step: clamped block means of (n/d) C over ordered off-diagonal pairs
        let mut sums = Matrix::zeros(k, k);
        for (e, &(i, j)) in edges.iter().enumerate() {
            let (a, bb) = (z.label(i), z.label(j));
            sums[(a, bb)] += scale * c[e];
            sums[(bb, a)] += scale * c[e];
        }
        b = Matrix::from_fn(k, k, |a, bb| {
            let p = pairs(a, bb);
            if p > 0.0 {
                (sums[(a, bb)] / p).clamp(0.0, r)
            } else {
                0.0
            }
        });
        // C step
        let target: Vec<(usize, usize, f64)> =
            edges.iter().map(|&(i, j)| (i, j, b[(z.label(i), z.label(j))] / scale)).collect();
        c = project_weights(g, &target, cap);
        // objective over ordered off-diagonal pairs
        let mut obj = 0.0;
        for a in 0..k {
            for bb in 0..k {
                obj += pairs(a, bb) * b[(a, bb)] * b[(a, bb)];
            }
        }
        for (e, &(i, j)) in edges.iter().enumerate() {
            let g0 = b[(z.label(i), z.label(j))];
            let v = scale * c[e];
            obj += 2.0 * ((v - g0) * (v - g0) - g0 * g0);
        }
        if obj > value - 1e-12 * value.abs().max(1.0) {
            value = value.min(obj);
            break;
        }
        value = obj;
    }
    (value, b)
}

/// Rounds rows of `θ` (given through `points`, whose distances match) with
/// balanced k-means, then averages `θ` over the blocks.
fn round_and_average(theta: &dyn Fn(usize, usize) -> f64, points: &Matrix, k: usize, r: f64, seed: u64) -> Result<(BlockMatrix, CommunityMembership)> {
    let n = points.rows();
    let km = balanced_kmeans(points, k, seed)?;
    let z = CommunityMembership::new(km.labels, k)?;
    let mut sums = Matrix::zeros(k, k);
    for i in 0..n {
        for j in 0..n {
            sums[(z.label(i), z.label(j))] += theta(i, j);
        }
    }
    let m = z.block_size() as f64;
    let entries = Matrix::from_fn(k, k, |a, b| (0.5 * (sums[(a, b)] + sums[(b, a)]) / (m * m)).clamp(0.0, r));
    Ok((BlockMatrix::new(entries, r)?, z))
}

/// Node-robust SBM estimate from degree parameter `d`: a surrogate `θ` for
/// `Z B Zᵀ`, then balanced k-means on its rows and block averages.
pub fn robust_sbm_estimate(g: &LabeledGraph, d: f64, k: usize, r: f64, seed: u64) -> Result<RobustEstimate> {
    let n_all = g.n();
    if k == 0 || k > n_all || !(d > 0.0) || !(r > 0.0) {
        return invalid("need 1 ≤ k ≤ n, d > 0, R > 0");
    }
    let mut flags = Vec::new();
    let g = if n_all % k != 0 {
        let keep = n_all - n_all % k;
        flags.push(format!("truncated_to_{keep}_vertices"));
        g.induced_subgraph(&(0..keep).collect::<Vec<_>>())
    } else {
        g.clone()
    };
    let n = g.n();
    let scale = n as f64 / d;
    let cap = 20.0 * r * d;

    if n <= ROBUST_SBM_EXACT_MAX_N {
        let mut best: Option<(f64, CommunityMembership, Matrix)> = None;
        for z in Equipartitions::new(n, k)? {
            let (v, b) = fit_labelling(&g, &z, scale, r, cap);
            if best.as_ref().map_or(true, |(bv, _, _)| v < *bv - 1e-12) {
                best = Some((v, z, b));
            }
        }
        let (value, z, b) = best.expect("at least one labelling");
        let theta = |i: usize, j: usize| b[(z.label(i), z.label(j))];
        let points = Matrix::from_fn(n, n, |i, j| theta(i, j));
        let (b_hat, z_hat) = round_and_average(&theta, &points, k, r, seed)?;
        return Ok(RobustEstimate { b_hat, z_hat, method: RobustMethod::Enumeration, program_value: Some(value), flags });
    }

    flags.push("spectral_surrogate_program".to_string());
    let (pruned, removed) = prune_high_degree(&g, cap);
    if !removed.is_empty() {
        flags.push(format!("pruned_vertices={}", removed.len()));
    }
    let eig = top_abs_eig(&pruned, k, derive_seed(seed, streams::SOLVER))?;
    let vals: Vec<f64> = eig.values.iter().map(|v| v * scale).collect();
    let theta = |i: usize, j: usize| {
        let s: f64 = vals.iter().enumerate().map(|(l, lam)| lam * eig.vectors[(i, l)] * eig.vectors[(j, l)]).sum();
        s.clamp(0.0, r)
    };
    let points = Matrix::from_fn(n, k, |i, l| eig.vectors[(i, l)] * vals[l]);
    let (b_hat, z_hat) = round_and_average(&theta, &points, k, r, seed)?;
    Ok(RobustEstimate { b_hat, z_hat, method: RobustMethod::SpectralSurrogate, program_value: None, flags })
}

/// Unclamped `(n/d) A` block averages under a labelling; handy for diagnostics.
pub fn scaled_block_means(g: &LabeledGraph, z: &CommunityMembership, d: f64) -> Matrix {
    let s = edge_block_sums(g, z, d / g.n() as f64);
    let m = z.block_size() as f64;
    s.scale(1.0 / (m * m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_models::sample_sbm;

    fn cliques(n: usize, k: usize) -> LabeledGraph {
        let m = n / k;
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| i / m == j / m);
        LabeledGraph::from_edges(n, edges).unwrap()
    }

    #[test]
    fn planted_cliques_pick_nearest_grid_point() {
        let g = cliques(8, 2);
        let cfg = PrivateConfig { step: Some(1.0), ..PrivateConfig::sbm(3) };
        let rep = private_sbm_estimate(&g, 2, 1e6, 4.0, &cfg).unwrap();
        assert_eq!(rep.scorer, Some(ScorerMode::Lipschitz));
        assert_eq!(rep.privacy, PrivacyLabel::Certified);
        assert!((rep.budget_total() - rep.epsilon).abs() < 1e-12);
        // ρ = 12/28, so A/ρ has in-block entries 7/3 off the diagonal and the
        // unconstrained optimum is 7/4 on the diagonal; 2 is the nearer level.
        let b = rep.b_hat.entries();
        assert_eq!(b[(0, 1)], 0.0);
        assert_eq!(b[(0, 0)], 2.0);
        assert_eq!(b[(1, 1)], 2.0);
    }

    #[test]
    fn seeds_are_deterministic() {
        let b0 = BlockMatrix::from_rows(vec![vec![1.5, 0.5], vec![0.5, 1.5]], 4.0).unwrap();
        let g = sample_sbm(&b0, 6.0, 60, 11).unwrap();
        let cfg = PrivateConfig::sbm(5);
        let a = private_sbm_estimate(&g, 2, 2.0, 4.0, &cfg).unwrap();
        let b = private_sbm_estimate(&g, 2, 2.0, 4.0, &cfg).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.scorer, Some(ScorerMode::SpectralSurrogate));
        assert_eq!(a.privacy, PrivacyLabel::Empirical);
        assert!(a.flags.iter().any(|f| f == "spectral_surrogate_scorer"));
    }

    #[test]
    fn spectral_recovers_disjoint_cliques() {
        let g = cliques(12, 3);
        let (b, z) = nonprivate_spectral_estimate(&g, 3, 1).unwrap();
        for a in 0..3 {
            let members = z.members(a);
            assert!(members.iter().all(|&i| i / 4 == members[0] / 4));
        }
        let e = b.entries();
        for a in 0..3 {
            for c in 0..3 {
                if a != c {
                    assert!(e[(a, c)].abs() < 1e-9);
                }
            }
        }
        assert!((e[(0, 0)] - e[(1, 1)]).abs() < 1e-9 && e[(0, 0)] > 1.0);
    }

    #[test]
    fn spectral_single_block_is_mean_of_truncation() {
        let b0 = BlockMatrix::from_rows(vec![vec![1.0]], 2.0).unwrap();
        let g = sample_sbm(&b0, 8.0, 40, 2).unwrap();
        let (b, _) = nonprivate_spectral_estimate(&g, 1, 0).unwrap();
        let eig = top_abs_eig(&g, 1, derive_seed(0, streams::SOLVER)).unwrap();
        let s: f64 = eig.vector(0).iter().sum();
        let mean = eig.values[0] * s * s / (40.0 * 40.0) / empirical_density(&g);
        assert!((b.get(0, 0) - mean).abs() < 1e-9);
    }

    #[test]
    fn subsample_rejects_tiny_graphs_with_hint() {
        let g = cliques(20, 2);
        let err = subsample_aggregate_estimate(&g, 2, 1.0, 0.5, 4.0, &PrivateConfig::sbm(0)).unwrap_err();
        let min = subsample_min_n(2, 1.0);
        assert!(err.to_string().contains(&min.to_string()));
        assert!(2 * 2 * subsample_parts(min, 2, 1.0) <= min);
    }

    #[test]
    fn robust_density_small_cases() {
        let g = cliques(6, 1);
        let none = robust_density_estimate(&g, 0.0).unwrap();
        assert!((none.value - 1.0).abs() < 1e-12 && none.exact);
        // complete graph, r = 2 removals
        let two = robust_density_estimate(&g, 0.34).unwrap();
        assert!((two.value - (4.0 * 3.0) / (6.0 * 5.0)).abs() < 1e-12);
        assert!((two.greedy - two.value).abs() < 1e-12);
        let lb = two.relaxation_bound.expect("small relaxation fits");
        assert!(lb <= two.value + 1e-9, "{lb} vs {}", two.value);
    }

    #[test]
    fn robust_density_nonincreasing_in_eta() {
        let b0 = BlockMatrix::from_rows(vec![vec![1.0, 0.2], vec![0.2, 1.0]], 2.0).unwrap();
        let g = sample_sbm(&b0, 5.0, 10, 4).unwrap();
        let mut prev = f64::INFINITY;
        for eta in [0.0, 0.1, 0.2, 0.3, 0.4] {
            let v = robust_density_estimate(&g, eta).unwrap().value;
            assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn robust_sbm_recovers_cliques() {
        let g = cliques(8, 2);
        let est = robust_sbm_estimate(&g, 3.0, 2, 4.0, 0).unwrap();
        assert_eq!(est.method, RobustMethod::Enumeration);
        let z = &est.z_hat;
        for a in 0..2 {
            let mem = z.members(a);
            assert!(mem.iter().all(|&i| i / 4 == mem[0] / 4));
        }
        let e = est.b_hat.entries();
        assert!(e[(0, 1)].abs() < 1e-9);
        assert!(e[(0, 0)] > 1.0 && (e[(0, 0)] - e[(1, 1)]).abs() < 1e-9);
    }

    #[test]
    fn robust_sbm_surrogate_on_large_cliques() {
        let g = cliques(40, 2);
        let est = robust_sbm_estimate(&g, 19.0, 2, 4.0, 0).unwrap();
        assert_eq!(est.method, RobustMethod::SpectralSurrogate);
        let mem = est.z_hat.members(0);
        assert!(mem.iter().all(|&i| i / 20 == mem[0] / 20));
    }
}
