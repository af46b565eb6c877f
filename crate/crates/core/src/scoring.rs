//! Scores for the exponential mechanism over block matrices.
//!
//! All scores are built on `f(Z; B, Y) = ⟨Z B Zᵀ, Y⟩ − ½‖Z B Zᵀ‖²_F`:
//! the ideal score maximises it over equipartitions `Z`, the Lipschitz score
//! replaces `Y` by the best `Y₋` below it with bounded row averages, and the
//! relaxed score is the largest `t` for which a low-level moment relaxation of
//! `{Z equipartition, Y₋ admissible, f(Y₋, Z; B) ≥ t}` is feasible.

use serde::{Deserialize, Serialize};

use crate::error::{capacity, invalid, Error, Result};
use crate::graph_models::{BlockMatrix, CommunityMembership};
use crate::linalg::perm::next_permutation;
use crate::linalg::Matrix;
use crate::lp;
use crate::poly::{Monomial, Polynomial};
use crate::sdp::{self, FeasibilityProblem, SolverOptions, Verdict};

pub const ENUMERATION_MAX_N: usize = 14;
pub const ENUMERATION_MAX_K: usize = 3;
/// Row averages of the admissible weight matrix are capped at this multiple of `R`.
pub const ROW_AVERAGE_FACTOR: f64 = 20.0;

/// Lexicographic enumeration of all ordered `k`-equipartitions of `n` vertices.
pub struct Equipartitions {
    labels: Vec<usize>,
    k: usize,
    started: bool,
    done: bool,
}

impl Equipartitions {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if k == 0 || n == 0 || n % k != 0 {
            return invalid(format!("need k | n (n={n}, k={k})"));
        }
        let m = n / k;
        Ok(Equipartitions { labels: (0..n).map(|i| i / m).collect(), k, started: false, done: false })
    }
}

impl Iterator for Equipartitions {
    type Item = CommunityMembership;

    fn next(&mut self) -> Option<CommunityMembership> {
        if self.done {
            return None;
        }
        if self.started && !next_permutation(&mut self.labels) {
            self.done = true;
            return None;
        }
        self.started = true;
        Some(CommunityMembership::new(self.labels.clone(), self.k).expect("equipartition"))
    }
}

/// Number of ordered equipartitions, `n! / ((n/k)!)^k`.
pub fn equipartition_count(n: usize, k: usize) -> Option<u128> {
    crate::linalg::perm::equipartition_count(n, k)
}

fn check_enumerable(n: usize, k: usize) -> Result<()> {
    if n > ENUMERATION_MAX_N {
        return capacity("vertices for exhaustive enumeration", n, ENUMERATION_MAX_N);
    }
    if k > ENUMERATION_MAX_K {
        return capacity("blocks for exhaustive enumeration", k, ENUMERATION_MAX_K);
    }
    if k == 0 || n % k != 0 {
        return invalid(format!("need k | n (n={n}, k={k})"));
    }
    Ok(())
}

fn check_square(y: &Matrix, n: usize) -> Result<()> {
    if y.rows() != n || y.cols() != n {
        return Err(Error::Dimension(format!("weight matrix is {}×{}, expected {n}×{n}", y.rows(), y.cols())));
    }
    Ok(())
}

/// `S[a][b] = Σ_{i∈a, j∈b} Y_ij`.
pub fn block_sums(z: &CommunityMembership, y: &Matrix) -> Matrix {
    let k = z.k();
    let n = z.n();
    let mut s = Matrix::zeros(k, k);
    for i in 0..n {
        let a = z.label(i);
        let row = y.row(i);
        for j in 0..n {
            s[(a, z.label(j))] += row[j];
        }
    }
    s
}

/// `½‖Z B Zᵀ‖²_F` for an equipartition: every block pair has `(n/k)²` entries.
fn half_gram(b: &BlockMatrix, n: usize) -> f64 {
    let m = (n / b.k()) as f64;
    0.5 * m * m * b.entries().frobenius_sq()
}

pub fn f_objective(z: &CommunityMembership, b: &BlockMatrix, y: &Matrix) -> Result<f64> {
    if z.k() != b.k() {
        return Err(Error::Dimension(format!("membership has k={}, block matrix k={}", z.k(), b.k())));
    }
    check_square(y, z.n())?;
    let s = block_sums(z, y);
    Ok(s.inner(b.entries()) - half_gram(b, z.n()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub value: f64,
    pub argmax: CommunityMembership,
}

/// Maximum of `f(Z; B, Y)` over all equipartitions; ties go to the
/// lexicographically first labelling.
pub fn ideal_score(b: &BlockMatrix, y: &Matrix) -> Result<ScoreResult> {
    let n = y.rows();
    check_enumerable(n, b.k())?;
    check_square(y, n)?;
    let half = half_gram(b, n);
    let mut best: Option<ScoreResult> = None;
    for z in Equipartitions::new(n, b.k())? {
        let v = block_sums(&z, y).inner(b.entries()) - half;
        if best.as_ref().map_or(true, |bst| v > bst.value) {
            best = Some(ScoreResult { value: v, argmax: z });
        }
    }
    Ok(best.expect("at least one equipartition"))
}

/// Solver used for the inner maximisation over `Y₋`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolver {
    #[default]
    Flow,
    Simplex,
}

/// Row-sum cap `n · 20R` on the admissible weight matrix.
pub fn row_sum_cap(n: usize, r: f64) -> f64 {
    ROW_AVERAGE_FACTOR * r * n as f64
}

pub fn lipschitz_score(b: &BlockMatrix, yin: &Matrix, r: f64) -> Result<ScoreResult> {
    lipschitz_score_with(b, yin, r, InnerSolver::Flow)
}

pub fn lipschitz_score_with(b: &BlockMatrix, yin: &Matrix, r: f64, solver: InnerSolver) -> Result<ScoreResult> {
    let n = yin.rows();
    check_enumerable(n, b.k())?;
    check_square(yin, n)?;
    if !(r > 0.0) {
        return invalid("entry bound R must be positive");
    }
    if yin.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return invalid("weight matrix must be finite and nonnegative");
    }
    if !yin.is_symmetric(1e-12) {
        return invalid("weight matrix must be symmetric");
    }
    let cap = row_sum_cap(n, r);
    let rows_ok = (0..n).all(|i| yin.row(i).iter().sum::<f64>() <= cap);
    if rows_ok && solver == InnerSolver::Flow {
        // Y₋ = Yin is admissible and optimal since ZBZᵀ ≥ 0
        return ideal_score(b, yin);
    }
    let caps = vec![cap; n];
    let half = half_gram(b, n);
    let mut best: Option<ScoreResult> = None;
    for z in Equipartitions::new(n, b.k())? {
        let w = Matrix::from_fn(n, n, |i, j| b.get(z.label(i), z.label(j)));
        let inner = match solver {
            InnerSolver::Flow => lp::capacitated_weight_max(&w, yin, &caps)?,
            InnerSolver::Simplex => lp::capacitated_weight_max_simplex(&w, yin, &caps)?,
        };
        let v = inner - half;
        if best.as_ref().map_or(true, |bst| v > bst.value) {
            best = Some(ScoreResult { value: v, argmax: z });
        }
    }
    Ok(best.expect("at least one equipartition"))
}

// ---------------------------------------------------------------------------
// constraint systems

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `p = 0`
    Eq,
    /// `p ≥ 0`
    Ge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// `Z` is the incidence matrix of a `k`-equipartition.
    Membership,
    /// `Y` lies entrywise in `[0, Yin]`, is symmetric, and has bounded row averages.
    Weights,
    /// `f(Y, Z; B) ≥ t`.
    Objective,
    Other,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub origin: Origin,
    pub label: String,
    pub poly: Polynomial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSystem {
    pub variables: Vec<String>,
    pub constraints: Vec<Constraint>,
}

impl ConstraintSystem {
    pub fn new(variables: Vec<String>) -> Self {
        ConstraintSystem { variables, constraints: Vec::new() }
    }

    pub fn num_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn push(&mut self, kind: ConstraintKind, origin: Origin, label: impl Into<String>, poly: Polynomial) {
        self.constraints.push(Constraint { kind, origin, label: label.into(), poly });
    }

    pub fn count(&self, origin: Origin, kind: ConstraintKind) -> usize {
        self.constraints.iter().filter(|c| c.origin == origin && c.kind == kind).count()
    }

    pub fn max_degree(&self) -> usize {
        self.constraints.iter().map(|c| c.poly.degree()).max().unwrap_or(0)
    }

    /// Constraint values at a point: equalities should be 0, inequalities ≥ 0.
    pub fn residuals(&self, x: &[f64]) -> Vec<f64> {
        self.constraints.iter().map(|c| c.poly.eval(x)).collect()
    }

    pub fn is_satisfied(&self, x: &[f64], tol: f64) -> bool {
        self.constraints.iter().all(|c| {
            let v = c.poly.eval(x);
            match c.kind {
                ConstraintKind::Eq => v.abs() <= tol,
                ConstraintKind::Ge => v >= -tol,
            }
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cs: ConstraintSystem = serde_json::from_str(s)?;
        let nv = cs.num_vars() as u32;
        for c in &cs.constraints {
            if c.poly.terms().any(|(m, _)| m.0.iter().any(|&v| v >= nv)) {
                return Err(Error::Parse(format!("constraint '{}' uses an undeclared variable", c.label)));
            }
        }
        Ok(cs)
    }
}

/// Variable layout of the score system: `z_{i}_{a}` first (row-major), then
/// `y_{i}_{j}` (row-major, all ordered pairs).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreVariables {
    pub n: usize,
    pub k: usize,
    pub with_weights: bool,
}

impl ScoreVariables {
    pub fn z(&self, i: usize, a: usize) -> usize {
        i * self.k + a
    }

    pub fn y(&self, i: usize, j: usize) -> usize {
        debug_assert!(self.with_weights);
        self.n * self.k + i * self.n + j
    }

    pub fn count(&self) -> usize {
        self.n * self.k + if self.with_weights { self.n * self.n } else { 0 }
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.n).flat_map(|i| (0..self.k).map(move |a| format!("z_{i}_{a}"))).collect();
        if self.with_weights {
            v.extend((0..self.n).flat_map(|i| (0..self.n).map(move |j| format!("y_{i}_{j}"))));
        }
        v
    }

    /// Point `(Z, Y)` in this layout.
    pub fn point(&self, z: &CommunityMembership, y: Option<&Matrix>) -> Vec<f64> {
        let mut x = vec![0.0; self.count()];
        for i in 0..self.n {
            x[self.z(i, z.label(i))] = 1.0;
        }
        if let (true, Some(y)) = (self.with_weights, y) {
            for i in 0..self.n {
                for j in 0..self.n {
                    x[self.y(i, j)] = y[(i, j)];
                }
            }
        }
        x
    }
}

fn membership_constraints(cs: &mut ConstraintSystem, v: &ScoreVariables) {
    let (n, k) = (v.n, v.k);
    for i in 0..n {
        for a in 0..k {
            let z = Polynomial::var(v.z(i, a));
            cs.push(ConstraintKind::Eq, Origin::Membership, format!("idempotent z_{i}_{a}"), z.mul(&z).sub(&z));
        }
    }
    for i in 0..n {
        let p = Polynomial::from_terms((0..k).map(|a| (Monomial::var(v.z(i, a)), 1.0)).chain([(Monomial::one(), -1.0)]));
        cs.push(ConstraintKind::Eq, Origin::Membership, format!("row sum {i}"), p);
    }
    let size = (n / k) as f64;
    for a in 0..k {
        let p = Polynomial::from_terms((0..n).map(|i| (Monomial::var(v.z(i, a)), 1.0)).chain([(Monomial::one(), -size)]));
        cs.push(ConstraintKind::Eq, Origin::Membership, format!("column sum {a}"), p);
    }
    for i in 0..n {
        for a in 0..k {
            cs.push(ConstraintKind::Ge, Origin::Membership, format!("nonnegative z_{i}_{a}"), Polynomial::var(v.z(i, a)));
        }
    }
}

fn weight_constraints(cs: &mut ConstraintSystem, v: &ScoreVariables, yin: &Matrix, r: f64) {
    let n = v.n;
    for i in 0..n {
        for j in 0..n {
            cs.push(ConstraintKind::Ge, Origin::Weights, format!("nonnegative y_{i}_{j}"), Polynomial::var(v.y(i, j)));
        }
    }
    for i in 0..n {
        for j in 0..n {
            let p = Polynomial::constant(yin[(i, j)]).sub(&Polynomial::var(v.y(i, j)));
            cs.push(ConstraintKind::Ge, Origin::Weights, format!("upper y_{i}_{j}"), p);
        }
    }
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let p = Polynomial::from_terms(
            (0..n).map(|j| (Monomial::var(v.y(i, j)), -inv_n)).chain([(Monomial::one(), ROW_AVERAGE_FACTOR * r)]),
        );
        cs.push(ConstraintKind::Ge, Origin::Weights, format!("row average {i}"), p);
    }
    for i in 0..n {
        for j in i + 1..n {
            let p = Polynomial::var(v.y(i, j)).sub(&Polynomial::var(v.y(j, i)));
            cs.push(ConstraintKind::Eq, Origin::Weights, format!("symmetric y_{i}_{j}"), p);
        }
    }
}

/// `(ZBZᵀ)_ij = Σ_ab B_ab z_ia z_jb` as a polynomial.
fn gram_entry(b: &BlockMatrix, v: &ScoreVariables, i: usize, j: usize) -> Polynomial {
    let k = v.k;
    let mut p = Polynomial::zero();
    for a in 0..k {
        for c in 0..k {
            let m = Monomial::from_vars(vec![v.z(i, a) as u32, v.z(j, c) as u32]);
            p.add_term(m, b.get(a, c));
        }
    }
    p
}

/// `f(Y, Z; B)` in the variables of `v`; with `yin` given and `v` without
/// weight variables, `Y` is the constant `yin`.
pub fn objective_polynomial(b: &BlockMatrix, v: &ScoreVariables, yin: Option<&Matrix>) -> Polynomial {
    let n = v.n;
    let mut f = Polynomial::zero();
    for i in 0..n {
        for j in 0..n {
            let g = gram_entry(b, v, i, j);
            let lin = if v.with_weights {
                g.mul(&Polynomial::var(v.y(i, j)))
            } else {
                g.scale(yin.map_or(0.0, |y| y[(i, j)]))
            };
            f = f.add(&lin).sub(&g.mul(&g).scale(0.5));
        }
    }
    f
}

fn check_system_inputs(b: &BlockMatrix, yin: &Matrix) -> Result<usize> {
    let n = yin.rows();
    check_square(yin, n)?;
    if b.k() == 0 || n % b.k() != 0 {
        return invalid(format!("need k | n (n={n}, k={})", b.k()));
    }
    Ok(n)
}

/// The full score system: membership constraints on `Z`, admissibility of `Y`
/// against `yin`, and `f(Y, Z; B) ≥ t`.
pub fn build_constraint_system(b: &BlockMatrix, yin: &Matrix, r: f64, t: f64) -> Result<ConstraintSystem> {
    let n = check_system_inputs(b, yin)?;
    let v = ScoreVariables { n, k: b.k(), with_weights: true };
    let mut cs = ConstraintSystem::new(v.names());
    membership_constraints(&mut cs, &v);
    weight_constraints(&mut cs, &v, yin, r);
    let f = objective_polynomial(b, &v, None);
    cs.push(ConstraintKind::Ge, Origin::Objective, "objective", f.sub(&Polynomial::constant(t)));
    Ok(cs)
}

/// Membership constraints plus `f(Z; B, yin) ≥ t` with `Y` fixed to `yin`.
pub fn build_fixed_weight_system(b: &BlockMatrix, yin: &Matrix, t: f64) -> Result<ConstraintSystem> {
    let n = check_system_inputs(b, yin)?;
    let v = ScoreVariables { n, k: b.k(), with_weights: false };
    let mut cs = ConstraintSystem::new(v.names());
    membership_constraints(&mut cs, &v);
    let f = objective_polynomial(b, &v, Some(yin));
    cs.push(ConstraintKind::Ge, Origin::Objective, "objective", f.sub(&Polynomial::constant(t)));
    Ok(cs)
}

// ---------------------------------------------------------------------------
// relaxed score

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxedOptions {
    pub level: usize,
    /// Binary-search resolution in score units; `None` means `1e-4 · n`.
    pub t_tol: Option<f64>,
    /// Keep the weights as variables (`true`) or fix them to `Yin`.
    pub weight_variables: bool,
    pub solver: SolverOptions,
    pub search: RelaxedSearch,
}

/// How the threshold `t` is located.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxedSearch {
    /// Maximise the objective's pseudo-expectation first, then confirm the
    /// bracket with feasibility decisions (bisecting only if that fails).
    #[default]
    Optimize,
    /// Plain bisection on feasibility decisions.
    Bisection,
}

impl Default for RelaxedOptions {
    fn default() -> Self {
        RelaxedOptions { level: 4, t_tol: None, weight_variables: true, solver: SolverOptions::default(), search: RelaxedSearch::Optimize }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxedScore {
    /// Largest `t` certified feasible.
    pub value: f64,
    /// Smallest `t` not certified feasible; the true relaxed score lies in `[value, upper]`
    /// unless `uncertain` is set.
    pub upper: f64,
    /// Some decision in the search came back `Unknown` (treated as infeasible).
    pub uncertain: bool,
    pub evaluations: Vec<(f64, Verdict)>,
}

/// Largest `t` such that the level-`level` moment relaxation of the score
/// system is feasible, located by bisection.
pub fn relaxed_score(b: &BlockMatrix, yin: &Matrix, r: f64, opts: &RelaxedOptions) -> Result<RelaxedScore> {
    let n = check_system_inputs(b, yin)?;
    if !(r > 0.0) {
        return invalid("entry bound R must be positive");
    }
    let t_tol = opts.t_tol.unwrap_or(1e-4 * n as f64);
    if !(t_tol > 0.0) {
        return invalid("t_tol must be positive");
    }
    // Work with Y/s and B/s so all variables are O(1); f scales by s².
    let s = yin.max_abs().max(b.max_entry());
    let s = if s > 0.0 { s } else { 1.0 };
    let bs = BlockMatrix::new(b.entries().scale(1.0 / s), b.bound() / s)?;
    let ys = yin.scale(1.0 / s);
    let cs = if opts.weight_variables {
        build_constraint_system(&bs, &ys, r / s, 0.0)?
    } else {
        build_fixed_weight_system(&bs, &ys, 0.0)?
    };
    let base = sdp::build_moment_relaxation(&cs, opts.level)?;
    let objective_idx = cs.constraints.len() - 1;
    // cheap path: the objective sits in a scalar block and only its constant moves with t
    let shiftable = base.block_index(objective_idx).filter(|&b| base.is_scalar_block(b));

    let k = b.k() as f64;
    let m = n as f64 / k;
    let bmax = bs.max_entry();
    // f ≥ −½‖ZBZᵀ‖² ≥ −½ n² max B² at any real point, and f ≤ max B · Σ Y
    let mut lo = -0.5 * m * m * k * k * bmax * bmax - 1.0;
    let total = ys.sum().min(row_sum_cap(n, r / s) * n as f64);
    let mut hi = bmax * total + 1.0;
    let tol_scaled = t_tol / (s * s);

    let mut evaluations = Vec::new();
    let mut uncertain = false;
    // anchor the lower end at a verified real point, so the relaxed value
    // never drops below it when the solver is inconclusive near the threshold
    let (wz, wy, wt) = relaxed_witness(&bs, &ys, r / s, opts.weight_variables)?;
    let vars = ScoreVariables { n, k: b.k(), with_weights: opts.weight_variables };
    let x = vars.point(&wz, Some(&wy));
    let admissible = ConstraintSystem { variables: Vec::new(), constraints: cs.constraints[..objective_idx].to_vec() };
    let mut witness = None;
    if admissible.is_satisfied(&x, 1e-9) {
        let at = match shiftable {
            Some(blk) => base.with_constant_shift(blk, -wt)?,
            None => relaxed_problem_scaled(&cs, wt, opts.level)?,
        };
        let mv = at.point_mass(&x)?;
        if at.verify(&mv)?.passes(opts.solver.tol) && wt > lo {
            lo = wt;
            evaluations.push((wt * s * s, Verdict::Feasible));
            witness = Some(mv);
        }
    }
    let mut warm: Option<Vec<f64>> = None;
    // climb from the witness along the barrier path; the end point is itself
    // a verified feasible point for its own t
    let mut located = false;
    if let (RelaxedSearch::Optimize, Some(blk), Some(mv)) = (opts.search, shiftable, &witness) {
        let slack = 0.25 * opts.solver.tol;
        if let Some(best) = sdp::maximize_scalar_block(&base, blk, mv, slack, 0.1 * tol_scaled)? {
            let at = base.with_constant_shift(blk, -best.value)?;
            if best.value > lo && at.verify(&best.moments)?.passes(opts.solver.tol) {
                lo = best.value;
                evaluations.push((lo * s * s, Verdict::Feasible));
                warm = Some(at.parameters_of(&best.moments));
            }
            located = true;
        }
    }
    let mut decide = |t: f64, warm: &mut Option<Vec<f64>>| -> Result<Verdict> {
        let p = match shiftable {
            Some(blk) => base.with_constant_shift(blk, -t)?,
            None => relaxed_problem_scaled(&cs, t, opts.level)?,
        };
        let out = sdp::solve_feasibility_from(&p, &opts.solver, warm.as_deref())?;
        if out.iterate.is_some() {
            *warm = out.iterate;
        }
        let v = out.outcome.kind();
        evaluations.push((t * s * s, v));
        Ok(v)
    };
    if located {
        // probe just above the located value, widening while still feasible
        let mut step = tol_scaled;
        for _ in 0..20 {
            let cand = lo + step;
            match decide(cand, &mut warm)? {
                Verdict::Feasible => {
                    lo = cand;
                    step *= 4.0;
                }
                v => {
                    uncertain |= v == Verdict::Unknown;
                    hi = hi.min(cand).max(lo);
                    break;
                }
            }
        }
    } else {
        // make sure the upper end is refuted before bisecting
        for _ in 0..8 {
            match decide(hi, &mut warm)? {
                Verdict::Feasible => {
                    lo = hi;
                    hi = 2.0 * hi.abs() + 1.0;
                }
                _ => break,
            }
        }
    }
    while hi - lo > tol_scaled {
        let mid = 0.5 * (lo + hi);
        match decide(mid, &mut warm)? {
            Verdict::Feasible => lo = mid,
            Verdict::Infeasible => hi = mid,
            Verdict::Unknown => {
                uncertain = true;
                hi = mid;
            }
        }
    }
    Ok(RelaxedScore { value: lo * s * s, upper: hi * s * s, uncertain, evaluations })
}

/// Largest equipartition count searched for a relaxed-score witness.
const WITNESS_ENUMERATION_LIMIT: u128 = 50_000;

/// An admissible real point `(Z, Y)` with its objective value; every `t`
/// up to that value is feasible for the relaxation.
fn relaxed_witness(b: &BlockMatrix, yin: &Matrix, r: f64, weight_variables: bool) -> Result<(CommunityMembership, Matrix, f64)> {
    let n = yin.rows();
    let k = b.k();
    let enumerable = n <= ENUMERATION_MAX_N && k <= ENUMERATION_MAX_K && equipartition_count(n, k).is_some_and(|c| c <= WITNESS_ENUMERATION_LIMIT);
    let (z, y) = match (enumerable, weight_variables) {
        (true, true) => {
            let z = lipschitz_score(b, yin, r)?.argmax;
            let w = Matrix::from_fn(n, n, |i, j| b.get(z.label(i), z.label(j)));
            let (_, y) = lp::capacitated_weight_argmax(&w, yin, &vec![row_sum_cap(n, r); n])?;
            (z, y)
        }
        (true, false) => (ideal_score(b, yin)?.argmax, yin.clone()),
        (false, with) => {
            let z = CommunityMembership::new((0..n).map(|i| i * k / n).collect(), k)?;
            (z, if with { Matrix::zeros(n, n) } else { yin.clone() })
        }
    };
    let v = f_objective(&z, b, &y)?;
    Ok((z, y, v))
}

fn relaxed_problem_scaled(cs: &ConstraintSystem, t: f64, level: usize) -> Result<FeasibilityProblem> {
    let mut cs_t = cs.clone();
    let last = cs_t.constraints.last_mut().expect("objective");
    last.poly = last.poly.sub(&Polynomial::constant(t));
    sdp::build_moment_relaxation(&cs_t, level)
}

/// Problem for a fixed `t`, exposed for diagnostics and the CLI.
pub fn relaxed_problem(b: &BlockMatrix, yin: &Matrix, r: f64, t: f64, level: usize) -> Result<FeasibilityProblem> {
    let cs = build_constraint_system(b, yin, r, t)?;
    sdp::build_moment_relaxation(&cs, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn random_instance(n: usize, seed: u64) -> (BlockMatrix, Matrix) {
        let mut r = rng::stream(seed, 99);
        let b = {
            let x = r.gen_range(0.0..2.0);
            let y = r.gen_range(0.0..2.0);
            let z = r.gen_range(0.0..2.0);
            BlockMatrix::from_rows(vec![vec![x, y], vec![y, z]], 2.0).unwrap()
        };
        let mut y = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let v = r.gen_range(0.0..3.0);
                y[(i, j)] = v;
                y[(j, i)] = v;
            }
        }
        (b, y)
    }

    fn naive_f(z: &CommunityMembership, b: &BlockMatrix, y: &Matrix) -> f64 {
        let n = z.n();
        let mut inner = 0.0;
        let mut sq = 0.0;
        for i in 0..n {
            for j in 0..n {
                let g = b.get(z.label(i), z.label(j));
                inner += g * y[(i, j)];
                sq += g * g;
            }
        }
        inner - 0.5 * sq
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(Equipartitions::new(4, 2).unwrap().count(), 6);
        assert_eq!(Equipartitions::new(6, 3).unwrap().count(), 90);
        assert_eq!(Equipartitions::new(6, 3).unwrap().count() as u128, equipartition_count(6, 3).unwrap());
    }

    #[test]
    fn objective_matches_double_loop() {
        for seed in 0..20 {
            let (b, y) = random_instance(4, seed);
            for z in Equipartitions::new(4, 2).unwrap() {
                let f = f_objective(&z, &b, &y).unwrap();
                assert!((f - naive_f(&z, &b, &y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn objective_special_cases() {
        let (b, _) = random_instance(4, 1);
        let z = CommunityMembership::new(vec![0, 1, 0, 1], 2).unwrap();
        let f0 = f_objective(&z, &b, &Matrix::zeros(4, 4)).unwrap();
        assert!((f0 + 0.5 * 4.0 * b.entries().frobenius_sq()).abs() < 1e-12);
        let zero = BlockMatrix::from_rows(vec![vec![0.0; 2]; 2], 1.0).unwrap();
        assert_eq!(f_objective(&z, &zero, &Matrix::filled(4, 4, 0.3)).unwrap(), 0.0);
    }

    #[test]
    fn ideal_score_planted_optimum() {
        let b = BlockMatrix::from_rows(vec![vec![1.5, 0.25], vec![0.25, 1.0]], 2.0).unwrap();
        let z0 = CommunityMembership::new(vec![1, 0, 0, 1, 0, 1], 2).unwrap();
        let y = Matrix::from_fn(6, 6, |i, j| b.get(z0.label(i), z0.label(j)));
        let s = ideal_score(&b, &y).unwrap();
        assert!((s.value - 0.5 * 9.0 * b.entries().frobenius_sq()).abs() < 1e-12);
        assert_eq!(s.argmax, z0);
    }

    #[test]
    fn ideal_score_n4_three_bipartitions() {
        // independent oracle: the three unordered splits, both label orders
        let splits = [[0usize, 1], [0, 2], [0, 3]];
        for seed in 0..10 {
            let (b, y) = random_instance(4, seed);
            let mut best = f64::NEG_INFINITY;
            for s in &splits {
                for flip in [false, true] {
                    let labels: Vec<usize> = (0..4).map(|i| (s.contains(&i) ^ flip) as usize).collect();
                    best = best.max(naive_f(&CommunityMembership::new(labels, 2).unwrap(), &b, &y));
                }
            }
            assert!((ideal_score(&b, &y).unwrap().value - best).abs() < 1e-12);
        }
    }

    #[test]
    fn ideal_score_capacity() {
        let b = BlockMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap();
        assert!(matches!(ideal_score(&b, &Matrix::zeros(16, 16)), Err(Error::Capacity { .. })));
    }

    #[test]
    fn lipschitz_agrees_when_rows_fit() {
        for seed in 0..10 {
            let (b, y) = random_instance(6, seed);
            let ideal = ideal_score(&b, &y).unwrap().value;
            let lip = lipschitz_score_with(&b, &y, 2.0, InnerSolver::Simplex).unwrap().value;
            assert!((ideal - lip).abs() < 1e-9, "{ideal} vs {lip}");
        }
    }

    #[test]
    fn lipschitz_flow_matches_simplex_when_capped() {
        for seed in 0..10 {
            let (b, mut y) = random_instance(6, seed + 50);
            // heavy rows: one vertex with huge weights
            for j in 1..6 {
                y[(0, j)] = 40.0;
                y[(j, 0)] = 40.0;
            }
            let r = 0.2;
            let f = lipschitz_score(&b, &y, r).unwrap().value;
            let s = lipschitz_score_with(&b, &y, r, InnerSolver::Simplex).unwrap().value;
            assert!((f - s).abs() < 1e-8, "{f} vs {s}");
            assert!(f <= ideal_score(&b, &y).unwrap().value + 1e-9);
        }
    }

    #[test]
    fn constraint_counts_n2() {
        let b = BlockMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap();
        let cs = build_constraint_system(&b, &Matrix::zeros(2, 2), 1.0, 0.0).unwrap();
        let idem = cs.constraints.iter().filter(|c| c.label.starts_with("idempotent")).count();
        let rows = cs.constraints.iter().filter(|c| c.label.starts_with("row sum")).count();
        let cols = cs.constraints.iter().filter(|c| c.label.starts_with("column sum")).count();
        let nonneg = cs.constraints.iter().filter(|c| c.label.starts_with("nonnegative z")).count();
        assert_eq!((idem, rows, cols, nonneg), (4, 2, 2, 4));
        assert_eq!(cs.count(Origin::Membership, ConstraintKind::Eq), 8);
        assert_eq!(cs.count(Origin::Membership, ConstraintKind::Ge), 4);
        assert_eq!(cs.variables[0], "z_0_0");
        assert_eq!(cs.variables[4], "y_0_0");
    }

    #[test]
    fn constraint_system_true_point_and_json() {
        let (b, y) = random_instance(4, 3);
        let r = 2.0;
        let cs = build_constraint_system(&b, &y, r, 0.0).unwrap();
        let v = ScoreVariables { n: 4, k: 2, with_weights: true };
        for z in Equipartitions::new(4, 2).unwrap() {
            let x = v.point(&z, Some(&y));
            let res = cs.residuals(&x);
            for (c, r) in cs.constraints.iter().zip(&res) {
                match (c.kind, c.origin) {
                    (_, Origin::Objective) => {
                        assert!((r - f_objective(&z, &b, &y).unwrap()).abs() < 1e-9)
                    }
                    (ConstraintKind::Eq, _) => assert!(r.abs() < 1e-12, "{}", c.label),
                    (ConstraintKind::Ge, _) => assert!(*r >= -1e-12, "{}", c.label),
                }
            }
        }
        let back = ConstraintSystem::from_json(&cs.to_json().unwrap()).unwrap();
        assert_eq!(back, cs);
    }
}
