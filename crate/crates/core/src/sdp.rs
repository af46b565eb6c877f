//! Low-level moment relaxations of polynomial systems and a first-order
//! semidefinite feasibility solver.
//!
//! Pipeline: linear equalities (including pairs `h ≥ 0`, `−h ≥ 0`) are
//! eliminated by substitution; the remaining equalities become linear
//! constraints on the moments, which are eliminated again so that the moment
//! vector is an affine function of free parameters. Each PSD block (moment
//! matrix, one localizing matrix per inequality) is restricted to the smallest
//! subspace containing the ranges of all its admissible values. Feasibility is
//! then decided by Douglas–Rachford splitting between the affine parametrisation
//! and the product of PSD cones.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{capacity, invalid, Error, Result};
use crate::linalg::eigen::ql_eig;
use crate::linalg::{Cholesky, Matrix, SymmetricMatrix};
use crate::poly::{monomials_up_to, Monomial, Polynomial};
use crate::scoring::{ConstraintKind, ConstraintSystem, Origin};

pub const MAX_BLOCK_DIM: usize = 2000;
pub const MAX_PARAMETERS: usize = 4000;
pub const MAX_MOMENTS: usize = 100_000;

const ZERO_COEF: f64 = 1e-12;

// ---------------------------------------------------------------------------
// presolve

#[derive(Clone, Debug)]
struct WorkConstraint {
    kind: ConstraintKind,
    poly: Polynomial,
    sources: Vec<usize>,
    label: String,
    /// Shifts of the source constant must stay attached to one block.
    tracked: bool,
    /// `poly = scale · (source polynomial after substitution)`.
    scale: f64,
}

impl WorkConstraint {
    fn normalize(&mut self) {
        self.poly = self.poly.prune(ZERO_COEF);
        let m = self.poly.max_abs_coef();
        if m > 0.0 {
            self.poly = self.poly.scale(1.0 / m);
            self.scale /= m;
        }
    }
}

struct Presolved {
    /// Original variable → affine polynomial in free variables.
    substitution: Vec<Polynomial>,
    free: Vec<usize>,
    constraints: Vec<WorkConstraint>,
    infeasible: Option<String>,
}

fn poly_key(p: &Polynomial) -> Vec<(Vec<u32>, i64)> {
    p.terms().map(|(m, c)| (m.0.clone(), (c * 1e9).round() as i64)).collect()
}

/// Turns `h ≥ 0`, `−h ≥ 0` into `h = 0` for linear `h`.
fn pair_opposite_inequalities(cons: &mut Vec<WorkConstraint>) -> bool {
    let mut seen: HashMap<Vec<(Vec<u32>, i64)>, usize> = HashMap::new();
    let mut pairs = Vec::new();
    let mut used = vec![false; cons.len()];
    for (i, c) in cons.iter().enumerate() {
        if c.kind != ConstraintKind::Ge || c.tracked || c.poly.degree() != 1 {
            continue;
        }
        let neg = poly_key(&c.poly.scale(-1.0));
        if let Some(&j) = seen.get(&neg) {
            if !used[j] {
                used[j] = true;
                used[i] = true;
                pairs.push((j, i));
                continue;
            }
        }
        seen.entry(poly_key(&c.poly)).or_insert(i);
    }
    if pairs.is_empty() {
        return false;
    }
    let mut added = Vec::new();
    for &(a, b) in &pairs {
        let mut sources = cons[a].sources.clone();
        sources.extend(&cons[b].sources);
        added.push(WorkConstraint {
            kind: ConstraintKind::Eq,
            poly: cons[a].poly.clone(),
            sources,
            label: format!("{} (forced)", cons[a].label),
            tracked: false,
            scale: cons[a].scale,
        });
    }
    let mut i = 0;
    cons.retain(|_| {
        i += 1;
        !used[i - 1]
    });
    cons.extend(added);
    true
}

/// Gauss–Jordan on the linear equalities; returns the substitution for the
/// pivot variables (in terms of the remaining ones) or an inconsistency.
fn linear_substitution(rows: &[Polynomial], nvars: usize, eliminated: &[bool]) -> std::result::Result<Vec<(usize, Polynomial)>, String> {
    let width = nvars + 1;
    let mut basis: Vec<(usize, Vec<f64>)> = Vec::new();
    for p in rows {
        let mut r = vec![0.0; width];
        for (m, c) in p.terms() {
            match m.0.as_slice() {
                [] => r[nvars] += c,
                [v] => r[*v as usize] += c,
                _ => unreachable!("linear row"),
            }
        }
        for (pv, row) in &basis {
            let f = r[*pv];
            if f != 0.0 {
                for (x, y) in r.iter_mut().zip(row) {
                    *x -= f * y;
                }
            }
        }
        let maxabs = r[..nvars].iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if maxabs <= 1e-10 {
            if r[nvars].abs() > 1e-9 {
                return Err(format!("linear equalities are inconsistent (residual {:.3e})", r[nvars]));
            }
            continue;
        }
        let pv = (0..nvars).rev().find(|&v| !eliminated[v] && r[v].abs() >= 0.5 * maxabs).expect("pivot exists");
        let f = r[pv];
        for x in r.iter_mut() {
            *x /= f;
        }
        for x in r.iter_mut() {
            if x.abs() < 1e-14 {
                *x = 0.0;
            }
        }
        for (_, row) in basis.iter_mut() {
            let g = row[pv];
            if g != 0.0 {
                for (x, y) in row.iter_mut().zip(&r) {
                    *x -= g * y;
                }
            }
        }
        basis.push((pv, r));
    }
    Ok(basis
        .into_iter()
        .map(|(pv, row)| {
            let mut expr = Polynomial::constant(-row[nvars]);
            for v in 0..nvars {
                if v != pv && row[v] != 0.0 {
                    expr.add_term(Monomial::var(v), -row[v]);
                }
            }
            (pv, expr)
        })
        .collect())
}

fn presolve(cs: &ConstraintSystem) -> Presolved {
    let n = cs.num_vars();
    let objective = cs.constraints.iter().rposition(|c| c.origin == Origin::Objective);
    let mut cons: Vec<WorkConstraint> = cs
        .constraints
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut w = WorkConstraint {
                kind: c.kind,
                poly: c.poly.clone(),
                sources: vec![i],
                label: c.label.clone(),
                tracked: Some(i) == objective,
                scale: 1.0,
            };
            w.normalize();
            w
        })
        .collect();
    let mut substitution: Vec<Polynomial> = (0..n).map(Polynomial::var).collect();
    let mut eliminated = vec![false; n];
    let mut infeasible = None;

    loop {
        let paired = pair_opposite_inequalities(&mut cons);
        let (linear, rest): (Vec<_>, Vec<_>) =
            cons.into_iter().partition(|c| c.kind == ConstraintKind::Eq && c.poly.degree() <= 1);
        cons = rest;
        if linear.is_empty() && !paired {
            break;
        }
        if linear.is_empty() {
            continue;
        }
        let polys: Vec<Polynomial> = linear.iter().map(|c| c.poly.clone()).collect();
        let subs = match linear_substitution(&polys, n, &eliminated) {
            Ok(s) => s,
            Err(msg) => {
                infeasible = Some(msg);
                break;
            }
        };
        if subs.is_empty() {
            continue;
        }
        let mut sigma: Vec<Polynomial> = (0..n).map(Polynomial::var).collect();
        for (pv, expr) in subs {
            sigma[pv] = expr;
            eliminated[pv] = true;
        }
        for s in substitution.iter_mut() {
            *s = s.substitute(&sigma).prune(ZERO_COEF);
        }
        for c in cons.iter_mut() {
            c.poly = c.poly.substitute(&sigma);
            c.normalize();
        }
        // substituted equalities may have collapsed to constants
        let mut bad = None;
        cons.retain(|c| {
            if c.kind == ConstraintKind::Eq && c.poly.degree() == 0 {
                if c.poly.constant_term().abs() > 1e-9 {
                    bad = Some(format!("equality '{}' reduces to a nonzero constant", c.label));
                }
                return false;
            }
            true
        });
        if bad.is_some() {
            infeasible = bad;
            break;
        }
    }

    // dedupe (equalities up to sign)
    let mut seen: HashMap<(bool, Vec<(Vec<u32>, i64)>), usize> = HashMap::new();
    let mut keep: Vec<WorkConstraint> = Vec::new();
    for mut c in cons {
        if c.kind == ConstraintKind::Eq && c.poly.is_zero() {
            continue;
        }
        if c.kind == ConstraintKind::Eq && c.poly.terms().next().map_or(false, |(_, v)| v < 0.0) {
            c.poly = c.poly.scale(-1.0);
        }
        if c.tracked {
            keep.push(c);
            continue;
        }
        let key = (c.kind == ConstraintKind::Eq, poly_key(&c.poly));
        match seen.get(&key) {
            Some(&j) => keep[j].sources.extend(c.sources),
            None => {
                seen.insert(key, keep.len());
                keep.push(c);
            }
        }
    }

    let free: Vec<usize> = (0..n).filter(|&v| !eliminated[v]).collect();
    let mut renumber: Vec<Polynomial> = vec![Polynomial::zero(); n];
    for (new, &old) in free.iter().enumerate() {
        renumber[old] = Polynomial::var(new);
    }
    let substitution = substitution.iter().map(|s| s.substitute(&renumber)).collect();
    for c in keep.iter_mut() {
        c.poly = c.poly.substitute(&renumber);
    }
    Presolved { substitution, free, constraints: keep, infeasible }
}

// ---------------------------------------------------------------------------
// moment vectors

/// Pseudo-moments of all monomials of degree `≤ level` in the free variables
/// of a relaxation; the original variables are affine in the free ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentVector {
    pub level: usize,
    pub num_free: usize,
    /// Graded-lex ordered, entry 0 is the constant monomial.
    pub values: Vec<f64>,
    /// Original variable `v` equals `substitution[v]` in the free variables.
    pub substitution: Vec<Polynomial>,
}

impl MomentVector {
    /// Moment vector over `nvars` variables with no substitution.
    pub fn from_values(nvars: usize, level: usize, values: Vec<f64>) -> Result<Self> {
        let expected = monomials_up_to(nvars, level).len();
        if values.len() != expected {
            return Err(Error::Dimension(format!("{} moment values for {expected} monomials", values.len())));
        }
        if (values[0] - 1.0).abs() > 1e-12 || values.iter().any(|v| !v.is_finite()) {
            return invalid("moment of the constant monomial must be 1 and all values finite");
        }
        Ok(MomentVector { level, num_free: nvars, values, substitution: (0..nvars).map(Polynomial::var).collect() })
    }

    /// Moments of the point mass at `x` (free-variable coordinates).
    pub fn point_mass_free(x: &[f64], level: usize, substitution: Vec<Polynomial>) -> Self {
        let values = monomials_up_to(x.len(), level).iter().map(|m| m.eval(x)).collect();
        MomentVector { level, num_free: x.len(), values, substitution }
    }

    pub fn monomials(&self) -> Vec<Monomial> {
        monomials_up_to(self.num_free, self.level)
    }

    fn index_of(&self, m: &Monomial) -> Option<usize> {
        // the table is graded-lex sorted
        let table = self.monomials();
        table.binary_search_by(|x| x.grlex_cmp(m)).ok()
    }

    /// Pseudo-expectation of a polynomial in the free variables.
    pub fn expect_free(&self, p: &Polynomial) -> Result<f64> {
        if p.degree() > self.level {
            return invalid(format!("degree {} exceeds the level {}", p.degree(), self.level));
        }
        let table = self.monomials();
        let mut s = 0.0;
        for (m, c) in p.terms() {
            let i = table.binary_search_by(|x| x.grlex_cmp(m)).map_err(|_| Error::Solver("monomial not in table".into()))?;
            s += c * self.values[i];
        }
        Ok(s)
    }

    pub fn value(&self, m: &Monomial) -> Option<f64> {
        self.index_of(m).map(|i| self.values[i])
    }
}

/// `Ẽ[p]` for a polynomial in the original variables of the system.
pub fn pseudo_expectation(mv: &MomentVector, p: &Polynomial) -> Result<f64> {
    if p.degree() > mv.level {
        return invalid(format!("degree {} exceeds the level {}", p.degree(), mv.level));
    }
    if p.terms().any(|(m, _)| m.0.iter().any(|&v| v as usize >= mv.substitution.len())) {
        return Err(Error::Dimension("polynomial uses an unknown variable".into()));
    }
    mv.expect_free(&p.substitute(&mv.substitution).prune(1e-15))
}

// ---------------------------------------------------------------------------
// feasibility problems

type Sparse = Vec<(u32, f64)>;

#[derive(Clone, Debug)]
struct Affine {
    constant: f64,
    terms: Sparse,
}

#[derive(Clone, Debug)]
struct Block {
    label: String,
    sources: Vec<usize>,
    dim: usize,
    /// Entry `(r, c)`, `r ≤ c`, as a combination of moments.
    entries: Vec<(u32, u32, Sparse)>,
    /// Same entries as affine functions of the parameters.
    affine: Vec<Affine>,
    /// Orthonormal basis of the complement of the forced kernel.
    reduce: Option<Matrix>,
    reduced_dim: usize,
    /// Block polynomial = `scale ·` source polynomial after substitution.
    scale: f64,
}

#[derive(Debug)]
struct ProblemData {
    level: usize,
    substitution: Vec<Polynomial>,
    free: Vec<usize>,
    free_names: Vec<String>,
    monomials: Vec<Monomial>,
    equality_rows: Vec<Sparse>,
    params: Vec<Affine>,
    num_params: usize,
    /// Moment index carrying each parameter.
    param_moments: Vec<usize>,
    blocks: Vec<Block>,
    source_block: Vec<Option<usize>>,
    infeasible: Option<String>,
    normal: Option<Cholesky>,
}

/// Immutable semidefinite feasibility problem; cheap to clone.
#[derive(Clone, Debug)]
pub struct FeasibilityProblem {
    data: Arc<ProblemData>,
    shifts: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub label: String,
    pub dim: usize,
    pub reduced_dim: usize,
}

fn merge(mut v: Vec<(u32, f64)>) -> Sparse {
    v.sort_unstable_by_key(|e| e.0);
    let mut out: Sparse = Vec::with_capacity(v.len());
    for (i, c) in v {
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 += c,
            _ => out.push((i, c)),
        }
    }
    out.retain(|e| e.1.abs() > 1e-14);
    out
}

/// Sparse Gauss–Jordan on moment rows; column 0 is the constant moment.
struct MomentElimination {
    pivot_row: Vec<Option<usize>>,
    rows: Vec<Sparse>,
    col_rows: Vec<Vec<usize>>,
    scratch: Vec<f64>,
    touched: Vec<bool>,
}

impl MomentElimination {
    fn new(n: usize) -> Self {
        MomentElimination {
            pivot_row: vec![None; n],
            rows: Vec::new(),
            col_rows: vec![Vec::new(); n],
            scratch: vec![0.0; n],
            touched: vec![false; n],
        }
    }

    fn add(&mut self, row: &Sparse) -> std::result::Result<(), String> {
        let mut cols: Vec<u32> = Vec::new();
        for &(j, c) in row {
            if !self.touched[j as usize] {
                self.touched[j as usize] = true;
                cols.push(j);
            }
            self.scratch[j as usize] += c;
        }
        let mut k = 0;
        while k < cols.len() {
            let j = cols[k] as usize;
            k += 1;
            if let Some(pr) = self.pivot_row[j] {
                let f = self.scratch[j];
                if f != 0.0 {
                    for &(c, v) in &self.rows[pr] {
                        if !self.touched[c as usize] {
                            self.touched[c as usize] = true;
                            cols.push(c);
                        }
                        self.scratch[c as usize] -= f * v;
                    }
                }
                self.scratch[j] = 0.0;
            }
        }
        let mut reduced: Sparse = Vec::new();
        for &j in &cols {
            let v = self.scratch[j as usize];
            self.scratch[j as usize] = 0.0;
            self.touched[j as usize] = false;
            if v.abs() > 1e-11 {
                reduced.push((j, v));
            }
        }
        reduced.sort_unstable_by_key(|e| e.0);
        let maxabs = reduced.iter().filter(|e| e.0 != 0).fold(0.0f64, |a, e| a.max(e.1.abs()));
        if maxabs <= 1e-10 {
            let c = reduced.iter().find(|e| e.0 == 0).map_or(0.0, |e| e.1);
            if c.abs() > 1e-8 {
                return Err(format!("moment equalities are inconsistent (residual {c:.3e})"));
            }
            return Ok(());
        }
        let &(pv, pc) = reduced.iter().rev().find(|e| e.0 != 0 && e.1.abs() >= 0.1 * maxabs).expect("pivot");
        for e in reduced.iter_mut() {
            e.1 /= pc;
        }
        let id = self.rows.len();
        // eliminate the new pivot from earlier rows
        let holders = std::mem::take(&mut self.col_rows[pv as usize]);
        for rid in holders {
            let Some(pos) = self.rows[rid].iter().position(|e| e.0 == pv) else { continue };
            let f = self.rows[rid][pos].1;
            let mut combined = self.rows[rid].clone();
            combined.extend(reduced.iter().map(|&(c, v)| (c, -f * v)));
            let combined = merge(combined);
            for &(c, _) in &combined {
                if c != pv && !self.rows[rid].iter().any(|e| e.0 == c) {
                    self.col_rows[c as usize].push(rid);
                }
            }
            self.rows[rid] = combined;
        }
        for &(c, _) in &reduced {
            if c != pv {
                self.col_rows[c as usize].push(id);
            }
        }
        self.pivot_row[pv as usize] = Some(id);
        self.rows.push(reduced);
        Ok(())
    }
}

/// Orthonormal basis of the smallest subspace containing the ranges of every
/// matrix in the affine family `L(w) = L₀ + Σ_j w_j L_j`; `None` when that is
/// the whole space. Directions outside it are in the kernel of every `L(w)`.
fn affine_range_basis(dim: usize, entries: &[(u32, u32, Sparse)], affine: &[Affine]) -> Result<Option<Matrix>> {
    if dim <= 1 {
        return Ok(None);
    }
    // K = L₀ᵀL₀ + Σ_j L_jᵀL_j, accumulated row by row of each L_j
    let mut by_param: HashMap<u32, Vec<(u32, u32, f64)>> = HashMap::new();
    let mut constant: Vec<(u32, u32, f64)> = Vec::new();
    for ((r, c, _), a) in entries.iter().zip(affine) {
        let push = |list: &mut Vec<(u32, u32, f64)>, v: f64| {
            list.push((*r, *c, v));
            if r != c {
                list.push((*c, *r, v));
            }
        };
        if a.constant != 0.0 {
            push(&mut constant, a.constant);
        }
        for &(j, v) in &a.terms {
            push(by_param.entry(j).or_default(), v);
        }
    }
    let mut k = vec![0.0; dim * dim];
    let mut accumulate = |mut list: Vec<(u32, u32, f64)>| {
        list.sort_unstable_by_key(|e| (e.0, e.1));
        let mut start = 0;
        while start < list.len() {
            let mut end = start;
            while end < list.len() && list[end].0 == list[start].0 {
                end += 1;
            }
            for x in &list[start..end] {
                for y in &list[start..end] {
                    k[x.1 as usize * dim + y.1 as usize] += x.2 * y.2;
                }
            }
            start = end;
        }
    };
    accumulate(constant);
    let mut params: Vec<_> = by_param.into_iter().collect();
    params.sort_unstable_by_key(|e| e.0);
    for (_, list) in params {
        accumulate(list);
    }
    let sym = SymmetricMatrix::from_fn(dim, |i, j| 0.5 * (k[i * dim + j] + k[j * dim + i]));
    let e = ql_eig(&sym)?;
    let top = e.values.first().copied().unwrap_or(0.0).max(0.0);
    let keep: Vec<usize> = (0..dim).filter(|&j| e.values[j] > 1e-10 * top).collect();
    if keep.len() == dim {
        return Ok(None);
    }
    Ok(Some(Matrix::from_fn(dim, keep.len(), |i, c| e.vectors[(i, keep[c])])))
}

/// Level-`level` moment relaxation of a constraint system.
pub fn build_moment_relaxation(cs: &ConstraintSystem, level: usize) -> Result<FeasibilityProblem> {
    if level < 2 || level % 2 != 0 {
        return invalid(format!("relaxation level must be even and ≥ 2, got {level}"));
    }
    if cs.max_degree() > level {
        return invalid(format!("level {level} is below the constraint degree {}", cs.max_degree()));
    }
    let pre = presolve(cs);
    let m = pre.free.len();
    let free_names: Vec<String> = pre.free.iter().map(|&v| cs.variables[v].clone()).collect();
    let count = crate::linalg::perm::binomial(m + level, level);
    if count.map_or(true, |c| c > MAX_MOMENTS as u128) {
        return capacity("moments", count.map_or(usize::MAX, |c| c.min(usize::MAX as u128) as usize), MAX_MOMENTS);
    }
    let monomials = monomials_up_to(m, level);
    let index: HashMap<Monomial, usize> = monomials.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
    let nm = monomials.len();
    let half = level / 2;
    let count_deg = |d: usize| monomials.iter().take_while(|x| x.degree() <= d).count();

    let mut infeasible = pre.infeasible.clone();
    let equalities: Vec<&WorkConstraint> = pre.constraints.iter().filter(|c| c.kind == ConstraintKind::Eq).collect();
    let inequalities: Vec<&WorkConstraint> = pre.constraints.iter().filter(|c| c.kind == ConstraintKind::Ge).collect();

    // equality rows Ẽ[g·u] = 0
    let mut equality_rows: Vec<Sparse> = Vec::new();
    for g in &equalities {
        let d = g.poly.degree();
        for u in &monomials[..count_deg(level - d)] {
            let row = merge(g.poly.terms().map(|(t, c)| (index[&t.mul(u)] as u32, c)).collect());
            if !row.is_empty() {
                equality_rows.push(row);
            }
        }
    }

    let mut elim = MomentElimination::new(nm);
    if infeasible.is_none() {
        for row in &equality_rows {
            if let Err(msg) = elim.add(row) {
                infeasible = Some(msg);
                break;
            }
        }
    }
    let mut param_of = vec![u32::MAX; nm];
    let mut num_params = 0usize;
    for j in 1..nm {
        if elim.pivot_row[j].is_none() {
            param_of[j] = num_params as u32;
            num_params += 1;
        }
    }
    if num_params > MAX_PARAMETERS {
        return capacity("free moment parameters", num_params, MAX_PARAMETERS);
    }
    let param_moments: Vec<usize> = (1..nm).filter(|&j| param_of[j] != u32::MAX).collect();
    let params: Vec<Affine> = (0..nm)
        .map(|j| {
            if j == 0 {
                Affine { constant: 1.0, terms: Vec::new() }
            } else if let Some(r) = elim.pivot_row[j] {
                let mut constant = 0.0;
                let mut terms = Vec::new();
                for &(c, v) in &elim.rows[r] {
                    if c as usize == j {
                        continue;
                    }
                    if c == 0 {
                        constant -= v;
                    } else {
                        terms.push((param_of[c as usize], -v));
                    }
                }
                Affine { constant, terms: merge(terms) }
            } else {
                Affine { constant: 0.0, terms: vec![(param_of[j], 1.0)] }
            }
        })
        .collect();

    // blocks
    let mut blocks = Vec::new();
    let mut specs: Vec<(String, Vec<usize>, Polynomial, usize, f64)> =
        vec![("moment matrix".to_string(), Vec::new(), Polynomial::constant(1.0), half, 1.0)];
    for c in &inequalities {
        let d = c.poly.degree();
        let bd = if d == 0 { 0 } else { (level - d) / 2 };
        specs.push((c.label.clone(), c.sources.clone(), c.poly.clone(), bd, c.scale));
    }
    for (label, sources, h, bd, scale) in specs {
        let dim = count_deg(bd);
        if dim > MAX_BLOCK_DIM {
            return capacity("PSD block dimension", dim, MAX_BLOCK_DIM);
        }
        let basis = &monomials[..dim];
        let mut entries = Vec::with_capacity(dim * (dim + 1) / 2);
        let mut affine = Vec::with_capacity(dim * (dim + 1) / 2);
        for r in 0..dim {
            for c in r..dim {
                let uv = basis[r].mul(&basis[c]);
                let mom = merge(h.terms().map(|(t, k)| (index[&t.mul(&uv)] as u32, k)).collect());
                let mut constant = 0.0;
                let mut terms = Vec::new();
                for &(mi, k) in &mom {
                    let a = &params[mi as usize];
                    constant += k * a.constant;
                    terms.extend(a.terms.iter().map(|&(p, v)| (p, k * v)));
                }
                affine.push(Affine { constant, terms: merge(terms) });
                entries.push((r as u32, c as u32, mom));
            }
        }
        let reduce = affine_range_basis(dim, &entries, &affine)?;
        let reduced_dim = reduce.as_ref().map_or(dim, |u| u.cols());
        blocks.push(Block { label, sources, dim, entries, affine, reduce, reduced_dim, scale });
    }
    let mut source_block = vec![None; cs.constraints.len()];
    for (b, blk) in blocks.iter().enumerate() {
        for &s in &blk.sources {
            source_block[s] = Some(b);
        }
    }

    // normal equations of the affine least-squares projection
    let normal = if num_params > 0 && infeasible.is_none() {
        let mut g = Matrix::zeros(num_params, num_params);
        for blk in &blocks {
            for ((r, c, _), a) in blk.entries.iter().zip(&blk.affine) {
                let wgt = if r == c { 1.0 } else { 2.0 };
                for &(i, ci) in &a.terms {
                    let row = g.row_mut(i as usize);
                    for &(j, cj) in &a.terms {
                        row[j as usize] += wgt * ci * cj;
                    }
                }
            }
        }
        let dmax = (0..num_params).map(|i| g[(i, i)]).fold(0.0, f64::max);
        for i in 0..num_params {
            g.data_mut()[i * num_params + i] += 1e-12 * dmax.max(1.0);
        }
        Some(Cholesky::new(&g)?)
    } else {
        None
    };

    let shifts = vec![0.0; blocks.len()];
    Ok(FeasibilityProblem {
        data: Arc::new(ProblemData {
            level,
            substitution: pre.substitution,
            free: pre.free,
            free_names,
            monomials,
            equality_rows,
            params,
            num_params,
            param_moments,
            blocks,
            source_block,
            infeasible,
            normal,
        }),
        shifts,
    })
}

#[derive(Serialize)]
struct DumpBlock<'a> {
    label: &'a str,
    dim: usize,
    reduced_dim: usize,
    entries: Vec<(u32, u32, &'a Sparse)>,
    constant_shift: f64,
}

#[derive(Serialize)]
struct Dump<'a> {
    level: usize,
    free_variables: &'a [String],
    monomials: &'a [Monomial],
    equality_rows: &'a [Sparse],
    num_parameters: usize,
    blocks: Vec<DumpBlock<'a>>,
    presolve_infeasible: &'a Option<String>,
}

impl FeasibilityProblem {
    pub fn level(&self) -> usize {
        self.data.level
    }

    pub fn num_moments(&self) -> usize {
        self.data.monomials.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.data.num_params
    }

    pub fn num_blocks(&self) -> usize {
        self.data.blocks.len()
    }

    pub fn free_variables(&self) -> &[String] {
        &self.data.free_names
    }

    pub fn substitution(&self) -> &[Polynomial] {
        &self.data.substitution
    }

    pub fn blocks(&self) -> Vec<BlockInfo> {
        self.data
            .blocks
            .iter()
            .map(|b| BlockInfo { label: b.label.clone(), dim: b.dim, reduced_dim: b.reduced_dim })
            .collect()
    }

    /// Block carrying the given source constraint (after presolve), if any.
    pub fn block_index(&self, constraint: usize) -> Option<usize> {
        self.data.source_block.get(constraint).copied().flatten()
    }

    pub fn is_scalar_block(&self, block: usize) -> bool {
        self.data.blocks.get(block).map_or(false, |b| b.dim == 1)
    }

    /// Copy of the problem with the constant of the source polynomial of a
    /// scalar block shifted by `delta`.
    pub fn with_constant_shift(&self, block: usize, delta: f64) -> Result<Self> {
        let b = self.data.blocks.get(block).ok_or_else(|| Error::InvalidInput(format!("no block {block}")))?;
        if b.dim != 1 {
            return invalid("constant shifts are only supported on scalar blocks");
        }
        let mut out = self.clone();
        out.shifts[block] += delta * b.scale;
        Ok(out)
    }

    /// Moments (with coefficients) forming entry `(r, c)` of a block.
    pub fn block_entry(&self, block: usize, r: usize, c: usize) -> Vec<(Monomial, f64)> {
        let (r, c) = (r.min(c) as u32, r.max(c) as u32);
        let b = &self.data.blocks[block];
        b.entries
            .iter()
            .find(|e| e.0 == r && e.1 == c)
            .map(|e| e.2.iter().map(|&(m, k)| (self.data.monomials[m as usize].clone(), k)).collect())
            .unwrap_or_default()
    }

    /// Moment index of `m` after substituting equal moments, as an affine
    /// function of the free parameters: `(constant, [(param, coef)])`.
    pub fn moment_parametrization(&self, m: &Monomial) -> Option<(f64, Vec<(usize, f64)>)> {
        let i = self.data.monomials.binary_search_by(|x| x.grlex_cmp(m)).ok()?;
        let a = &self.data.params[i];
        Some((a.constant, a.terms.iter().map(|&(p, v)| (p as usize, v)).collect()))
    }

    pub fn presolve_infeasible(&self) -> Option<&str> {
        self.data.infeasible.as_deref()
    }

    pub fn dump_json(&self) -> Result<String> {
        let d = &self.data;
        let dump = Dump {
            level: d.level,
            free_variables: &d.free_names,
            monomials: &d.monomials,
            equality_rows: &d.equality_rows,
            num_parameters: d.num_params,
            blocks: d
                .blocks
                .iter()
                .zip(&self.shifts)
                .map(|(b, &s)| DumpBlock {
                    label: &b.label,
                    dim: b.dim,
                    reduced_dim: b.reduced_dim,
                    entries: b.entries.iter().map(|(r, c, e)| (*r, *c, e)).collect(),
                    constant_shift: s,
                })
                .collect(),
            presolve_infeasible: &d.infeasible,
        };
        Ok(serde_json::to_string(&dump)?)
    }

    /// Lifts a point of the original system to its point-mass moments.
    pub fn point_mass(&self, x: &[f64]) -> Result<MomentVector> {
        let d = &self.data;
        if x.len() != d.substitution.len() {
            return Err(Error::Dimension(format!("point has {} coordinates, system has {}", x.len(), d.substitution.len())));
        }
        let free_vals: Vec<f64> = d.free.iter().map(|&v| x[v]).collect();
        Ok(MomentVector::point_mass_free(&free_vals, d.level, d.substitution.clone()))
    }

    fn block_raw_from_moments(&self, b: usize, y: &[f64]) -> Matrix {
        let blk = &self.data.blocks[b];
        let mut m = Matrix::zeros(blk.dim, blk.dim);
        for (r, c, mom) in &blk.entries {
            let mut v: f64 = mom.iter().map(|&(i, k)| k * y[i as usize]).sum();
            if blk.dim == 1 {
                v += self.shifts[b];
            }
            m[(*r as usize, *c as usize)] = v;
            m[(*c as usize, *r as usize)] = v;
        }
        m
    }

    /// Free parameters of a moment vector (its values on the free moments).
    pub fn parameters_of(&self, mv: &MomentVector) -> Vec<f64> {
        self.data.param_moments.iter().map(|&j| mv.values.get(j).copied().unwrap_or(0.0)).collect()
    }

    /// Independent check of a moment vector against this problem.
    pub fn verify(&self, mv: &MomentVector) -> Result<Verification> {
        let d = &self.data;
        if mv.values.len() != d.monomials.len() || mv.level != d.level {
            return Err(Error::Dimension("moment vector does not match the problem".into()));
        }
        let y = &mv.values;
        let mut max_eq = (y[0] - 1.0).abs();
        for row in &d.equality_rows {
            let r: f64 = row.iter().map(|&(i, k)| k * y[i as usize]).sum();
            max_eq = max_eq.max(r.abs());
        }
        let mut min_eig = f64::INFINITY;
        for b in 0..d.blocks.len() {
            let m = self.block_raw_from_moments(b, y);
            let e = min_eigenvalue(&m)?;
            min_eig = min_eig.min(e);
        }
        Ok(Verification { max_equality_residual: max_eq, min_eigenvalue: min_eig })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub max_equality_residual: f64,
    pub min_eigenvalue: f64,
}

impl Verification {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_equality_residual <= tol && self.min_eigenvalue >= -tol
    }
}

fn min_eigenvalue(m: &Matrix) -> Result<f64> {
    if m.rows() == 0 {
        return Ok(f64::INFINITY);
    }
    if m.rows() == 1 {
        return Ok(m[(0, 0)]);
    }
    let s = SymmetricMatrix::from_fn(m.rows(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    Ok(ql_eig(&s)?.min_value())
}

// ---------------------------------------------------------------------------
// solver

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    DouglasRachford,
    AlternatingProjections,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Accept when every block has min eigenvalue `≥ −tol` and equality residuals `≤ tol`.
    pub tol: f64,
    /// Declare infeasible only when the best achievable smallest eigenvalue
    /// is certified below `−infeasible_margin`.
    pub infeasible_margin: f64,
    /// Splitting iterations before switching to the barrier method.
    pub first_order_iter: usize,
    /// Splitting iterations when the barrier method is out of budget.
    pub max_iter: usize,
    pub method: Method,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-7, infeasible_margin: 1e-5, first_order_iter: 25, max_iter: 20_000, method: Method::DouglasRachford }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Feasible,
    Infeasible,
    Unknown,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Feasible(MomentVector),
    Infeasible,
    Unknown,
}

impl Outcome {
    pub fn kind(&self) -> Verdict {
        match self {
            Outcome::Feasible(_) => Verdict::Feasible,
            Outcome::Infeasible => Verdict::Infeasible,
            Outcome::Unknown => Verdict::Unknown,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub outcome: Outcome,
    /// Parameters of the accepted point, usable as a warm start.
    pub iterate: Option<Vec<f64>>,
    pub iterations: usize,
    /// Last splitting gap (distance between the affine and conic iterates).
    pub gap: f64,
    pub barrier_steps: usize,
    pub min_eigenvalue: f64,
}

pub fn solve_feasibility(p: &FeasibilityProblem, tol: f64) -> Result<Outcome> {
    let opts = SolverOptions { tol, ..SolverOptions::default() };
    Ok(solve_feasibility_from(p, &opts, None)?.outcome)
}

struct Workspace<'a> {
    p: &'a FeasibilityProblem,
    offsets: Vec<usize>,
    len: usize,
}

impl<'a> Workspace<'a> {
    fn new(p: &'a FeasibilityProblem) -> Self {
        let mut offsets = Vec::new();
        let mut len = 0;
        for b in &p.data.blocks {
            offsets.push(len);
            len += b.dim * b.dim;
        }
        Workspace { p, offsets, len }
    }

    fn constant(&self, b: usize, e: usize) -> f64 {
        let blk = &self.p.data.blocks[b];
        blk.affine[e].constant + if blk.dim == 1 { self.p.shifts[b] } else { 0.0 }
    }

    /// `C + 𝒜 w` as stacked dense blocks.
    fn affine_point(&self, w: &[f64], out: &mut [f64]) {
        for (b, blk) in self.p.data.blocks.iter().enumerate() {
            let o = self.offsets[b];
            let d = blk.dim;
            for (e, ((r, c, _), a)) in blk.entries.iter().zip(&blk.affine).enumerate() {
                let v = self.constant(b, e) + a.terms.iter().map(|&(i, k)| k * w[i as usize]).sum::<f64>();
                out[o + *r as usize * d + *c as usize] = v;
                out[o + *c as usize * d + *r as usize] = v;
            }
        }
    }

    /// `𝒜 u` (no constants) as stacked dense blocks.
    fn linear_point(&self, u: &[f64], out: &mut [f64]) {
        for (b, blk) in self.p.data.blocks.iter().enumerate() {
            let o = self.offsets[b];
            let d = blk.dim;
            for ((r, c, _), a) in blk.entries.iter().zip(&blk.affine) {
                let v = a.terms.iter().map(|&(i, k)| k * u[i as usize]).sum::<f64>();
                out[o + *r as usize * d + *c as usize] = v;
                out[o + *c as usize * d + *r as usize] = v;
            }
        }
    }

    /// `𝒜ᵀ v`: adjoint of the linear part under the full-matrix inner product.
    fn adjoint(&self, v: &[f64]) -> Vec<f64> {
        let d = &self.p.data;
        let mut out = vec![0.0; d.num_params];
        for (b, blk) in d.blocks.iter().enumerate() {
            let o = self.offsets[b];
            let dim = blk.dim;
            for ((r, c, _), a) in blk.entries.iter().zip(&blk.affine) {
                let (r, c) = (*r as usize, *c as usize);
                let t = if r == c { v[o + r * dim + r] } else { v[o + r * dim + c] + v[o + c * dim + r] };
                for &(i, k) in &a.terms {
                    out[i as usize] += k * t;
                }
            }
        }
        out
    }

    /// Strength of a Farkas-type refutation built from a candidate dual
    /// direction `s` (stacked, PSD in the reduced coordinates): `s` is first
    /// projected onto `ker 𝒜ᵀ`, then every admissible `X` would need
    /// `⟨s, X⟩ = ⟨s, C⟩ < 0` despite `s ⪰ 0`. Returns the certified margin
    /// per unit norm (positive means infeasible).
    fn refutation_margin(&self, s: &[f64]) -> Result<f64> {
        let d = &self.p.data;
        let nrm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        let s: Vec<f64> = s.iter().map(|x| x / nrm).collect();
        let mut u = self.adjoint(&s);
        if let Some(ch) = &d.normal {
            ch.solve(&mut u);
        }
        let mut corr = vec![0.0; self.len];
        self.linear_point(&u, &mut corr);
        let s: Vec<f64> = s.iter().zip(&corr).map(|(a, b)| a - b).collect();
        let residual = self.adjoint(&s).iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut value = 0.0;
        let mut negative = 0.0f64;
        let mut total_dim = 0usize;
        for (b, blk) in d.blocks.iter().enumerate() {
            let o = self.offsets[b];
            let dim = blk.dim;
            for (e, (r, c, _)) in blk.entries.iter().enumerate() {
                let (r, c) = (*r as usize, *c as usize);
                let t = if r == c { s[o + r * dim + r] } else { s[o + r * dim + c] + s[o + c * dim + r] };
                value += self.constant(b, e) * t;
            }
            let m = Matrix::from_vec(dim, dim, s[o..o + dim * dim].to_vec())?;
            let red = match &blk.reduce {
                Some(u) => u.transpose().matmul(&m).matmul(u),
                None => m,
            };
            negative = negative.max(-min_eigenvalue(&red)?);
            total_dim += blk.reduced_dim;
        }
        let snorm = s.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        // generous bounds on the trace of an admissible point and on ‖w‖
        let trace_bound = 1e2 * total_dim as f64;
        let param_bound = 1e3 * (d.num_params as f64).sqrt().max(1.0);
        Ok((-value - negative * trace_bound - residual * param_bound) / snorm)
    }

    /// Least-squares parameters for the stacked blocks `z`.
    fn project_params(&self, z: &[f64]) -> Vec<f64> {
        let d = &self.p.data;
        let mut rhs = vec![0.0; d.num_params];
        for (b, blk) in d.blocks.iter().enumerate() {
            let o = self.offsets[b];
            let dim = blk.dim;
            for (e, ((r, c, _), a)) in blk.entries.iter().zip(&blk.affine).enumerate() {
                let (r, c) = (*r as usize, *c as usize);
                let (wgt, zv) = if r == c { (1.0, z[o + r * dim + r]) } else { (2.0, 0.5 * (z[o + r * dim + c] + z[o + c * dim + r])) };
                let t = wgt * (zv - self.constant(b, e));
                for &(i, k) in &a.terms {
                    rhs[i as usize] += k * t;
                }
            }
        }
        if let Some(ch) = &d.normal {
            ch.solve(&mut rhs);
        }
        rhs
    }

    /// Projects stacked blocks onto the product of (reduced) PSD cones;
    /// returns the smallest reduced eigenvalue seen.
    fn project_cone(&self, src: &[f64], out: &mut [f64]) -> Result<f64> {
        let mut min_eig = f64::INFINITY;
        for (b, blk) in self.p.data.blocks.iter().enumerate() {
            let o = self.offsets[b];
            let d = blk.dim;
            let m = Matrix::from_vec(d, d, src[o..o + d * d].to_vec())?;
            let (proj, e) = project_block(&m, blk.reduce.as_ref())?;
            min_eig = min_eig.min(e);
            out[o..o + d * d].copy_from_slice(proj.data());
        }
        Ok(min_eig)
    }

    fn min_reduced_eig(&self, x: &[f64]) -> Result<f64> {
        let mut min_eig = f64::INFINITY;
        for (b, blk) in self.p.data.blocks.iter().enumerate() {
            let o = self.offsets[b];
            let d = blk.dim;
            let m = Matrix::from_vec(d, d, x[o..o + d * d].to_vec())?;
            let r = match &blk.reduce {
                Some(u) => u.transpose().matmul(&m).matmul(u),
                None => m,
            };
            min_eig = min_eig.min(min_eigenvalue(&r)?);
        }
        Ok(min_eig)
    }

    fn moments(&self, w: &[f64]) -> Vec<f64> {
        self.p.data.params.iter().map(|a| a.constant + a.terms.iter().map(|&(i, k)| k * w[i as usize]).sum::<f64>()).collect()
    }
}

fn project_block(m: &Matrix, reduce: Option<&Matrix>) -> Result<(Matrix, f64)> {
    let d = m.rows();
    let x = match reduce {
        Some(u) => u.transpose().matmul(m).matmul(u),
        None => m.clone(),
    };
    let r = x.rows();
    if r == 0 {
        return Ok((Matrix::zeros(d, d), f64::INFINITY));
    }
    let (xp, min_e) = if r == 1 {
        let v = x[(0, 0)];
        (Matrix::filled(1, 1, v.max(0.0)), v)
    } else {
        let s = SymmetricMatrix::from_fn(r, |i, j| 0.5 * (x[(i, j)] + x[(j, i)]));
        let e = ql_eig(&s)?;
        let mut out = Matrix::zeros(r, r);
        for (j, &lam) in e.values.iter().enumerate() {
            if lam <= 0.0 {
                continue;
            }
            for a in 0..r {
                let va = lam * e.vectors[(a, j)];
                if va == 0.0 {
                    continue;
                }
                let row = out.row_mut(a);
                for bb in 0..r {
                    row[bb] += va * e.vectors[(bb, j)];
                }
            }
        }
        (out, e.min_value())
    };
    let full = match reduce {
        Some(u) => u.matmul(&xp).matmul(&u.transpose()),
        None => xp,
    };
    Ok((full, min_e))
}

/// Problems with more parameters than this skip the barrier method.
pub const BARRIER_MAX_PARAMETERS: usize = 3000;

pub fn solve_feasibility_from(p: &FeasibilityProblem, opts: &SolverOptions, warm: Option<&[f64]>) -> Result<SolveOutput> {
    let d = &p.data;
    let done = |outcome, iterate, iterations, gap, min_eigenvalue, barrier_steps| SolveOutput { outcome, iterate, iterations, gap, min_eigenvalue, barrier_steps };
    if d.infeasible.is_some() {
        return Ok(done(Outcome::Infeasible, None, 0, f64::INFINITY, f64::NEG_INFINITY, 0));
    }
    let ws = Workspace::new(p);
    let mut xa = vec![0.0; ws.len];

    let moment_vector = |w: &[f64]| MomentVector { level: d.level, num_free: d.free_names.len(), values: ws.moments(w), substitution: d.substitution.clone() };
    let accept = |w: &[f64]| -> Result<bool> { Ok(p.verify(&moment_vector(w))?.passes(opts.tol)) };

    if d.num_params == 0 {
        ws.affine_point(&[], &mut xa);
        let e = ws.min_reduced_eig(&xa)?;
        let outcome = if e >= -opts.tol && accept(&[])? {
            Outcome::Feasible(moment_vector(&[]))
        } else if e < -opts.infeasible_margin {
            Outcome::Infeasible
        } else {
            Outcome::Unknown
        };
        return Ok(done(outcome, None, 0, (-e).max(0.0), e, 0));
    }

    let use_barrier = d.num_params <= BARRIER_MAX_PARAMETERS;
    let split_iters = if use_barrier { opts.first_order_iter } else { opts.max_iter };
    let w_start = match warm {
        Some(w) if w.len() == d.num_params => w.to_vec(),
        _ => vec![0.0; d.num_params],
    };
    let mut z = vec![0.0; ws.len];
    ws.affine_point(&w_start, &mut z);
    let mut xk = vec![0.0; ws.len];
    let mut refl = vec![0.0; ws.len];
    let mut gap = f64::INFINITY;
    let mut min_e = f64::NEG_INFINITY;
    let mut w = w_start.clone();
    let check_every = 5;
    for it in 0..split_iters {
        w = ws.project_params(&z);
        ws.affine_point(&w, &mut xa);
        if it % check_every == 0 {
            min_e = ws.min_reduced_eig(&xa)?;
            if min_e >= -opts.tol && accept(&w)? {
                return Ok(done(Outcome::Feasible(moment_vector(&w)), Some(w), it, gap, min_e, 0));
            }
        }
        match opts.method {
            Method::DouglasRachford => {
                for i in 0..ws.len {
                    refl[i] = 2.0 * xa[i] - z[i];
                }
                ws.project_cone(&refl, &mut xk)?;
                let mut g2 = 0.0;
                for i in 0..ws.len {
                    let diff = xk[i] - xa[i];
                    z[i] += diff;
                    g2 += diff * diff;
                }
                gap = g2.sqrt();
            }
            Method::AlternatingProjections => {
                ws.project_cone(&xa, &mut xk)?;
                let mut g2 = 0.0;
                for i in 0..ws.len {
                    let diff = xk[i] - xa[i];
                    g2 += diff * diff;
                }
                gap = g2.sqrt();
                z.copy_from_slice(&xk);
            }
        }
        if it >= 100 && it % 50 == 0 && gap > opts.infeasible_margin {
            // the conic projection residual is PSD in reduced coordinates
            let src = if opts.method == Method::DouglasRachford { &refl } else { &xa };
            let cand: Vec<f64> = xk.iter().zip(src).map(|(a, b)| a - b).collect();
            if ws.refutation_margin(&cand)? > opts.infeasible_margin {
                return Ok(done(Outcome::Infeasible, None, it, gap, min_e, 0));
            }
        }
    }
    if !use_barrier {
        return Ok(done(Outcome::Unknown, None, split_iters, gap, min_e, 0));
    }
    // the warm start is usually closer to the path than the splitting iterate
    let w0 = if warm.is_some() { w_start } else { w };
    let (res, steps) = barrier_phase1(&ws, opts, w0, &accept)?;
    Ok(match res {
        Phase1::Feasible(w) => {
            ws.affine_point(&w, &mut xa);
            let e = ws.min_reduced_eig(&xa)?;
            done(Outcome::Feasible(moment_vector(&w)), Some(w), split_iters, gap, e, steps)
        }
        Phase1::Infeasible => done(Outcome::Infeasible, None, split_iters, gap, min_e, steps),
        Phase1::Unknown(w) => {
            ws.affine_point(&w, &mut xa);
            let e = ws.min_reduced_eig(&xa)?;
            done(Outcome::Unknown, None, split_iters, gap, e, steps)
        }
    })
}

// ---------------------------------------------------------------------------
// interior-point phase I
//
// maximise λ subject to  Uᵀ X_b(w) U − λ I ⪰ 0  for every block, with
// ‖w‖ < R and λ < cap, by following the log-barrier central path. The
// optimal λ* is the best achievable smallest eigenvalue; on the path,
// λ* ≤ λ + m / t where m is the barrier degree.

struct BarrierBlock {
    block: usize,
    params: Vec<u32>,
    /// Raw entries of the coefficient matrix of each parameter, both triangles.
    entries: Vec<Vec<(u32, u32, f64)>>,
}

struct Barrier<'a> {
    ws: &'a Workspace<'a>,
    blocks: Vec<BarrierBlock>,
    radius2: f64,
    cap: f64,
    degree: f64,
}

struct Slack {
    inv: Matrix,
    log_det: f64,
}

enum Phase1 {
    Feasible(Vec<f64>),
    Infeasible,
    Unknown(Vec<f64>),
}

impl<'a> Barrier<'a> {
    fn new(ws: &'a Workspace<'a>, radius2: f64, cap: f64, exclude: Option<usize>) -> Self {
        let mut blocks = Vec::new();
        let mut degree = 2.0;
        for (b, blk) in ws.p.data.blocks.iter().enumerate() {
            if blk.reduced_dim == 0 || exclude == Some(b) {
                continue;
            }
            degree += blk.reduced_dim as f64;
            let mut by_param: BTreeMap<u32, Vec<(u32, u32, f64)>> = BTreeMap::new();
            for ((r, c, _), a) in blk.entries.iter().zip(&blk.affine) {
                for &(i, k) in &a.terms {
                    let e = by_param.entry(i).or_default();
                    e.push((*r, *c, k));
                    if r != c {
                        e.push((*c, *r, k));
                    }
                }
            }
            let (params, entries) = by_param.into_iter().unzip();
            blocks.push(BarrierBlock { block: b, params, entries });
        }
        Barrier { ws, blocks, radius2, cap, degree }
    }

    fn reduced(&self, raw: &[f64], b: usize) -> Result<Matrix> {
        let blk = &self.ws.p.data.blocks[b];
        let o = self.ws.offsets[b];
        let m = Matrix::from_vec(blk.dim, blk.dim, raw[o..o + blk.dim * blk.dim].to_vec())?;
        Ok(match &blk.reduce {
            Some(u) => u.transpose().matmul(&m).matmul(u),
            None => m,
        })
    }

    fn min_eig(&self, w: &[f64]) -> Result<f64> {
        let mut raw = vec![0.0; self.ws.len];
        self.ws.affine_point(w, &mut raw);
        let mut e = f64::INFINITY;
        for bb in &self.blocks {
            e = e.min(min_eigenvalue(&self.reduced(&raw, bb.block)?)?);
        }
        Ok(e)
    }

    /// Slack factorizations, or `None` outside the barrier domain.
    fn slacks(&self, w: &[f64], lam: f64) -> Result<Option<Vec<Slack>>> {
        if lam >= self.cap || !w.iter().all(|x| x.is_finite()) || w.iter().map(|x| x * x).sum::<f64>() >= self.radius2 {
            return Ok(None);
        }
        let mut raw = vec![0.0; self.ws.len];
        self.ws.affine_point(w, &mut raw);
        let mut out = Vec::with_capacity(self.blocks.len());
        for bb in &self.blocks {
            let mut s = self.reduced(&raw, bb.block)?;
            for i in 0..s.rows() {
                s[(i, i)] -= lam;
            }
            match Cholesky::new(&s) {
                Ok(ch) => out.push(Slack { inv: ch.inverse(), log_det: ch.log_det() }),
                Err(_) => return Ok(None),
            }
        }
        Ok(Some(out))
    }

    /// Block and ball barrier terms.
    fn value(&self, w: &[f64], slacks: &[Slack]) -> f64 {
        let q = self.radius2 - w.iter().map(|x| x * x).sum::<f64>();
        -slacks.iter().map(|s| s.log_det).sum::<f64>() - q.ln()
    }

    /// Gradient and Hessian of [`Barrier::value`] in `(w, λ)`, λ last.
    fn derivatives(&self, w: &[f64], slacks: &[Slack]) -> Result<(Vec<f64>, Matrix)> {
        let p = w.len();
        let n = p + 1;
        let mut g = vec![0.0; n];
        let mut h = Matrix::zeros(n, n);
        for (bb, sl) in self.blocks.iter().zip(slacks) {
            let blk = &self.ws.p.data.blocks[bb.block];
            let (shat, shat2) = match &blk.reduce {
                Some(u) => {
                    let su = sl.inv.matmul(&u.transpose());
                    let s2u = sl.inv.matmul(&su);
                    (u.matmul(&su), u.matmul(&s2u))
                }
                None => (sl.inv.clone(), sl.inv.matmul(&sl.inv)),
            };
            let d = blk.dim;
            g[p] += (0..sl.inv.rows()).map(|i| sl.inv[(i, i)]).sum::<f64>();
            h[(p, p)] += sl.inv.frobenius_sq();
            let mut tmat = vec![0.0; d * d];
            for (li, (&i, ei)) in bb.params.iter().zip(&bb.entries).enumerate() {
                let i = i as usize;
                let mut gi = 0.0;
                let mut hl = 0.0;
                tmat.iter_mut().for_each(|x| *x = 0.0);
                for &(a, c, v) in ei {
                    let (a, c) = (a as usize, c as usize);
                    gi += v * shat[(c, a)];
                    hl += v * shat2[(c, a)];
                    let row_c = shat.row(c);
                    for x in 0..d {
                        let sa = v * shat[(x, a)];
                        if sa == 0.0 {
                            continue;
                        }
                        let trow = &mut tmat[x * d..(x + 1) * d];
                        for (tv, sv) in trow.iter_mut().zip(row_c) {
                            *tv += sa * sv;
                        }
                    }
                }
                g[i] -= gi;
                h[(i, p)] -= hl;
                h[(p, i)] -= hl;
                for (&j, ej) in bb.params[li..].iter().zip(&bb.entries[li..]) {
                    let j = j as usize;
                    let v: f64 = ej.iter().map(|&(a, c, v)| v * tmat[c as usize * d + a as usize]).sum();
                    h[(i, j)] += v;
                    if i != j {
                        h[(j, i)] += v;
                    }
                }
            }
        }
        let q = self.radius2 - w.iter().map(|x| x * x).sum::<f64>();
        for i in 0..p {
            g[i] += 2.0 * w[i] / q;
            h[(i, i)] += 2.0 / q;
            for j in 0..p {
                h[(i, j)] += 4.0 * w[i] * w[j] / (q * q);
            }
        }
        Ok((g, h))
    }

    fn newton_step(g: &[f64], h: &Matrix) -> Result<Vec<f64>> {
        let mut rhs: Vec<f64> = g.iter().map(|x| -x).collect();
        let ch = match Cholesky::new(h) {
            Ok(ch) => ch,
            Err(_) => {
                let tr = (0..h.rows()).map(|i| h[(i, i)]).sum::<f64>() / h.rows() as f64;
                let mut hr = h.clone();
                for i in 0..h.rows() {
                    hr[(i, i)] += 1e-12 * tr.max(1.0);
                }
                Cholesky::new(&hr)?
            }
        };
        ch.solve(&mut rhs);
        Ok(rhs)
    }
}

fn barrier_phase1(ws: &Workspace<'_>, opts: &SolverOptions, w0: Vec<f64>, accept: &dyn Fn(&[f64]) -> Result<bool>) -> Result<(Phase1, usize)> {
    let p = ws.p.data.num_params;
    let w0_norm2 = w0.iter().map(|x| x * x).sum::<f64>();
    let radius2 = (1e4 * (p as f64).max(1.0)).max(4.0 * w0_norm2);
    let probe = Barrier::new(ws, radius2, f64::INFINITY, None);
    let e0 = probe.min_eig(&w0)?;
    if probe.blocks.is_empty() {
        return Ok((if accept(&w0)? { Phase1::Feasible(w0) } else { Phase1::Unknown(w0) }, 0));
    }
    let mut lam = e0 - 1.0;
    let bar = Barrier { cap: 1f64.max(e0 + 1.0), ..probe };
    let mut w = w0;
    let mut t = 1.0;
    let mut steps = 0;
    let Some(mut slacks) = bar.slacks(&w, lam)? else {
        return Ok((Phase1::Unknown(w), 0));
    };
    for _outer in 0..40 {
        let mut centered = false;
        for _inner in 0..60 {
            let (mut g, mut h) = bar.derivatives(&w, &slacks)?;
            let qc = bar.cap - lam;
            g[p] += -t + 1.0 / qc;
            h[(p, p)] += 1.0 / (qc * qc);
            let dx = Barrier::newton_step(&g, &h)?;
            let slope: f64 = g.iter().zip(&dx).map(|(a, b)| a * b).sum();
            if -slope < 1e-10 {
                centered = true;
                break;
            }
            let merit = |w: &[f64], lam: f64, sl: &[Slack]| -t * lam + bar.value(w, sl) - (bar.cap - lam).ln();
            let f0 = merit(&w, lam, &slacks);
            let mut s = 1.0;
            let mut moved = false;
            while s > 1e-14 {
                let wc: Vec<f64> = w.iter().zip(&dx).map(|(a, b)| a + s * b).collect();
                let lc = lam + s * dx[p];
                if let Some(sc) = bar.slacks(&wc, lc)? {
                    if merit(&wc, lc, &sc) <= f0 + 0.25 * s * slope {
                        w = wc;
                        lam = lc;
                        slacks = sc;
                        moved = true;
                        break;
                    }
                }
                s *= 0.5;
            }
            steps += 1;
            if !moved {
                break;
            }
            if lam >= -0.5 * opts.tol && accept(&w)? {
                return Ok((Phase1::Feasible(w), steps));
            }
        }
        let bound = bar.degree / t;
        if centered && lam + 2.0 * bound < -opts.infeasible_margin {
            return Ok((Phase1::Infeasible, steps));
        }
        if !centered || bound < 0.1 * opts.tol {
            break;
        }
        t *= 8.0;
    }
    Ok((Phase1::Unknown(w), steps))
}

/// Outcome of [`maximize_scalar_block`].
#[derive(Clone, Debug)]
pub struct Maximum {
    /// Source-constraint value `h(w)` of the objective block at the final point.
    pub value: f64,
    pub moments: MomentVector,
    /// Path-following bound on how far `value` may be below the optimum.
    pub gap_bound: f64,
    pub steps: usize,
}

/// Maximises the pseudo-expectation of the scalar block `objective` over all
/// moment vectors whose other blocks satisfy `X ⪰ −slack·I`, following the
/// barrier path from `start` (which must lie strictly inside). Returns `None`
/// when `start` is unusable or the block is not scalar.
pub fn maximize_scalar_block(p: &FeasibilityProblem, objective: usize, start: &MomentVector, slack: f64, gap: f64) -> Result<Option<Maximum>> {
    let d = &p.data;
    if !p.is_scalar_block(objective) || d.infeasible.is_some() || d.num_params > BARRIER_MAX_PARAMETERS || !(slack > 0.0) || !(gap > 0.0) {
        return Ok(None);
    }
    if start.values.len() != d.monomials.len() {
        return Err(Error::Dimension("moment vector does not match the problem".into()));
    }
    let ws = Workspace::new(p);
    let np = d.num_params;
    let blk = &d.blocks[objective];
    let c0 = blk.affine[0].constant / blk.scale;
    let mut c = vec![0.0; np];
    for &(i, k) in &blk.affine[0].terms {
        c[i as usize] = k / blk.scale;
    }
    let mut w: Vec<f64> = d.param_moments.iter().map(|&j| start.values[j]).collect();
    let radius2 = (1e4 * (np as f64).max(1.0)).max(4.0 * w.iter().map(|x| x * x).sum::<f64>());
    let bar = Barrier::new(&ws, radius2, f64::INFINITY, Some(objective));
    let objective_value = |w: &[f64]| c0 + c.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
    let Some(mut slacks) = bar.slacks(&w, -slack)? else {
        return Ok(None);
    };
    let mut t = 1.0;
    let mut steps = 0;
    let mut bound = f64::INFINITY;
    for _outer in 0..50 {
        for _inner in 0..60 {
            let (g_full, h_full) = bar.derivatives(&w, &slacks)?;
            let mut g: Vec<f64> = g_full[..np].iter().zip(&c).map(|(a, ci)| a - t * ci).collect();
            let h = Matrix::from_fn(np, np, |i, j| h_full[(i, j)]);
            let dx = Barrier::newton_step(&g, &h)?;
            let slope: f64 = g.iter().zip(&dx).map(|(a, b)| a * b).sum();
            if -slope < 1e-10 {
                break;
            }
            let merit = |w: &[f64], sl: &[Slack]| -t * objective_value(w) + bar.value(w, sl);
            let f0 = merit(&w, &slacks);
            let mut s = 1.0;
            let mut moved = false;
            while s > 1e-14 {
                let wc: Vec<f64> = w.iter().zip(&dx).map(|(a, b)| a + s * b).collect();
                if let Some(sc) = bar.slacks(&wc, -slack)? {
                    if merit(&wc, &sc) <= f0 + 0.25 * s * slope {
                        w = wc;
                        slacks = sc;
                        moved = true;
                        break;
                    }
                }
                s *= 0.5;
            }
            steps += 1;
            g.clear();
            if !moved {
                break;
            }
        }
        bound = bar.degree / t;
        if bound < gap {
            break;
        }
        t *= 8.0;
    }
    let moments = MomentVector { level: d.level, num_free: d.free_names.len(), values: ws.moments(&w), substitution: d.substitution.clone() };
    Ok(Some(Maximum { value: objective_value(&w), moments, gap_bound: bound, steps }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{Constraint, ConstraintKind, Origin};

    fn system(nvars: usize, cons: Vec<(ConstraintKind, Polynomial)>) -> ConstraintSystem {
        ConstraintSystem {
            variables: (0..nvars).map(|i| format!("x{i}")).collect(),
            constraints: cons
                .into_iter()
                .enumerate()
                .map(|(i, (kind, poly))| Constraint { kind, origin: Origin::Other, label: format!("c{i}"), poly })
                .collect(),
        }
    }

    fn x(i: usize) -> Polynomial {
        Polynomial::var(i)
    }

    #[test]
    fn idempotent_variable_collapses() {
        let cs = system(1, vec![(ConstraintKind::Eq, x(0).mul(&x(0)).sub(&x(0)))]);
        let p = build_moment_relaxation(&cs, 2).unwrap();
        assert_eq!(p.num_blocks(), 1);
        assert_eq!(p.blocks()[0].dim, 2);
        // entry (1,1) is m₂, which is parametrised exactly like m₁
        let m1 = p.moment_parametrization(&Monomial::var(0)).unwrap();
        let m2 = p.moment_parametrization(&Monomial(vec![0, 0])).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(p.block_entry(0, 0, 1), vec![(Monomial::var(0), 1.0)]);
        assert_eq!(p.block_entry(0, 0, 0), vec![(Monomial::one(), 1.0)]);
    }

    #[test]
    fn contradictory_bounds_infeasible() {
        let cs = system(
            1,
            vec![(ConstraintKind::Ge, x(0).sub(&Polynomial::constant(1.0))), (ConstraintKind::Ge, x(0).scale(-1.0))],
        );
        let p = build_moment_relaxation(&cs, 2).unwrap();
        assert_eq!(solve_feasibility(&p, 1e-7).unwrap(), Outcome::Infeasible);
    }

    #[test]
    fn empty_system_feasible() {
        let cs = system(2, vec![]);
        let p = build_moment_relaxation(&cs, 2).unwrap();
        let out = solve_feasibility(&p, 1e-7).unwrap();
        let Outcome::Feasible(mv) = out else { panic!("expected feasible, got {out:?}") };
        assert!(p.verify(&mv).unwrap().passes(1e-7));
    }

    #[test]
    fn level_checks() {
        let cs = system(1, vec![(ConstraintKind::Ge, x(0).mul(&x(0)).mul(&x(0)))]);
        assert!(build_moment_relaxation(&cs, 2).is_err());
        assert!(build_moment_relaxation(&cs, 3).is_err());
        assert!(build_moment_relaxation(&cs, 4).is_ok());
    }

    #[test]
    fn box_and_disk() {
        // unit disk with x + y ≥ 1.2: feasible (x = y = 0.65)
        let disk = Polynomial::constant(1.0).sub(&x(0).mul(&x(0))).sub(&x(1).mul(&x(1)));
        let cs = system(2, vec![(ConstraintKind::Ge, disk.clone()), (ConstraintKind::Ge, x(0).add(&x(1)).sub(&Polynomial::constant(1.2)))]);
        let p = build_moment_relaxation(&cs, 2).unwrap();
        assert_eq!(solve_feasibility(&p, 1e-7).unwrap().kind(), Verdict::Feasible);
        // x + y ≥ 1.5 is outside the disk (max √2 ≈ 1.414), and level 2 sees it
        let cs = system(2, vec![(ConstraintKind::Ge, disk), (ConstraintKind::Ge, x(0).add(&x(1)).sub(&Polynomial::constant(1.5)))]);
        let p = build_moment_relaxation(&cs, 2).unwrap();
        assert_eq!(solve_feasibility(&p, 1e-7).unwrap().kind(), Verdict::Infeasible);
    }

    #[test]
    fn pseudo_expectation_point_mass_and_linear() {
        let cs = system(3, vec![]);
        let p = build_moment_relaxation(&cs, 4).unwrap();
        let pt = [0.3, -1.2, 2.0];
        let mv = p.point_mass(&pt).unwrap();
        let poly = x(0).mul(&x(1)).mul(&x(2)).add(&x(2).mul(&x(2)).scale(0.5)).add(&Polynomial::constant(-1.0));
        assert!((pseudo_expectation(&mv, &poly).unwrap() - poly.eval(&pt)).abs() < 1e-12);
        assert_eq!(pseudo_expectation(&mv, &Polynomial::constant(1.0)).unwrap(), 1.0);
        let deg5 = x(0).mul(&x(0)).mul(&x(0)).mul(&x(0)).mul(&x(0));
        assert!(pseudo_expectation(&mv, &deg5).is_err());
    }
}
