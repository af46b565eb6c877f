//! Distances between connectivity matrices and block graphons.
//!
//! `δ₂²` between two block graphons with the same number of blocks equals the
//! minimum of a nonnegative quadratic over the Birkhoff polytope; that minimum
//! is computed with multistart away-step Frank–Wolfe. The permutation-only
//! distances are exact by enumeration and serve as brackets.

use serde::{Deserialize, Serialize};

use crate::error::{capacity, invalid, Error, Result};
use crate::graph_models::BlockGraphon;
use crate::linalg::perm::{factorial, lcm, Permutations};
use crate::linalg::{hungarian, Matrix};
use crate::rng;

/// Default cap on `k` for the enumeration-based distances.
pub const FACTORIAL_CAP: usize = 6;
/// Largest common refinement accepted by [`delta2_block_graphons`].
pub const REFINEMENT_CAP: usize = 12;

/// A `k × k` doubly stochastic matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoublyStochastic {
    pub entries: Matrix,
}

impl DoublyStochastic {
    /// Clamps tiny negatives to zero and checks row/column sums within `1e-9`.
    pub fn new(mut entries: Matrix) -> Result<Self> {
        if !entries.is_square() {
            return invalid("doubly stochastic matrix must be square");
        }
        for v in entries.data_mut() {
            if *v < -1e-12 {
                return invalid("negative entry in doubly stochastic matrix");
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let k = entries.rows();
        for i in 0..k {
            let r: f64 = entries.row(i).iter().sum();
            let c: f64 = (0..k).map(|j| entries[(j, i)]).sum();
            if (r - 1.0).abs() > 1e-9 || (c - 1.0).abs() > 1e-9 {
                return invalid("row or column sum differs from 1");
            }
        }
        Ok(DoublyStochastic { entries })
    }

    pub fn permutation(perm: &[usize]) -> Self {
        let k = perm.len();
        DoublyStochastic { entries: Matrix::from_fn(k, k, |i, j| if perm[i] == j { 1.0 } else { 0.0 }) }
    }

    pub fn k(&self) -> usize {
        self.entries.rows()
    }
}

/// `p(S) = vec(S)ᵀ Q vec(S) + cᵀ vec(S) + c0`, with `vec(S)[a·k + a'] = S(a, a')`.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    k: usize,
    quad: Matrix,
    lin: Vec<f64>,
    constant: f64,
}

impl QuadraticObjective {
    /// The objective whose minimum over the Birkhoff polytope is `δ₂²(B, B0)`:
    /// `(1/k²) Σ (B(a,b) − B0(a',b'))² S(a,a') S(b,b')`.
    pub fn from_pair(b: &Matrix, b0: &Matrix) -> Result<Self> {
        check_pair(b, b0)?;
        let k = b.rows();
        let kk = (k * k) as f64;
        let quad = Matrix::from_fn(k * k, k * k, |i, j| {
            let (a, a2) = (i / k, i % k);
            let (c, c2) = (j / k, j % k);
            let d = b[(a, c)] - b0[(a2, c2)];
            d * d / kk
        });
        Ok(QuadraticObjective { k, quad, lin: vec![0.0; k * k], constant: 0.0 })
    }

    /// General objective; `quad` is symmetrised.
    pub fn new(k: usize, quad: Matrix, lin: Vec<f64>, constant: f64) -> Result<Self> {
        if quad.rows() != k * k || quad.cols() != k * k || lin.len() != k * k {
            return Err(Error::Dimension("objective size must be k² ".into()));
        }
        let sym = quad.add(&quad.transpose()).scale(0.5);
        Ok(QuadraticObjective { k, quad: sym, lin, constant })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn eval(&self, s: &[f64]) -> f64 {
        let qs = self.quad.matvec(s);
        s.iter().zip(&qs).map(|(a, b)| a * b).sum::<f64>()
            + s.iter().zip(&self.lin).map(|(a, b)| a * b).sum::<f64>()
            + self.constant
    }

    pub fn eval_matrix(&self, s: &Matrix) -> f64 {
        self.eval(s.data())
    }

    fn grad(&self, s: &[f64]) -> Vec<f64> {
        let qs = self.quad.matvec(s);
        qs.iter().zip(&self.lin).map(|(q, l)| 2.0 * q + l).collect()
    }

    fn curvature(&self, d: &[f64]) -> f64 {
        let qd = self.quad.matvec(d);
        d.iter().zip(&qd).map(|(a, b)| a * b).sum()
    }

    fn scale(&self) -> f64 {
        self.quad.max_abs().max(self.lin.iter().fold(0.0f64, |m, v| m.max(v.abs()))).max(1e-300)
    }
}

#[derive(Clone, Debug)]
pub struct BirkhoffOptions {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when the Frank–Wolfe gap falls below `tol` (relative to the
    /// largest objective coefficient).
    pub tol: f64,
    pub seed: u64,
}

impl Default for BirkhoffOptions {
    fn default() -> Self {
        BirkhoffOptions { restarts: 64, max_iter: 10_000, tol: 1e-8, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct BirkhoffSolution {
    pub value: f64,
    pub argmin: DoublyStochastic,
    /// Set when the best run hit the iteration cap before the gap tolerance.
    pub approximate: bool,
}

fn check_pair(b: &Matrix, b0: &Matrix) -> Result<()> {
    if !b.is_square() || !b0.is_square() || b.rows() != b0.rows() || b.rows() == 0 {
        return Err(Error::Dimension(format!(
            "need two k×k matrices, got {}x{} and {}x{}",
            b.rows(),
            b.cols(),
            b0.rows(),
            b0.cols()
        )));
    }
    Ok(())
}

fn perm_vec(perm: &[usize]) -> Vec<f64> {
    let k = perm.len();
    let mut v = vec![0.0; k * k];
    for (i, &j) in perm.iter().enumerate() {
        v[i * k + j] = 1.0;
    }
    v
}

/// Multistart away-step Frank–Wolfe over the Birkhoff polytope.
pub fn minimize_quadratic_birkhoff(obj: &QuadraticObjective, opts: &BirkhoffOptions) -> Result<BirkhoffSolution> {
    if opts.restarts == 0 {
        return invalid("restarts must be at least 1");
    }
    let k = obj.k;
    let mut starts: Vec<Vec<(Vec<usize>, f64)>> = Vec::new();
    if k <= FACTORIAL_CAP {
        // best vertex first; every vertex too when there are few of them
        let mut verts: Vec<(f64, Vec<usize>)> = Permutations::new(k).map(|p| (obj.eval(&perm_vec(&p)), p)).collect();
        verts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let take = if factorial(k) <= opts.restarts / 2 { verts.len() } else { 1 };
        starts.extend(verts.into_iter().take(take).map(|(_, p)| vec![(p, 1.0)]));
    }
    let mut r = rng::stream(opts.seed, rng::streams::SOLVER);
    while starts.len() < opts.restarts {
        let m = k.max(2);
        let mut atoms = Vec::with_capacity(m);
        let mut total = 0.0;
        for _ in 0..m {
            let mut p: Vec<usize> = (0..k).collect();
            rng::shuffle(&mut p, &mut r);
            let w = rng::open_unit_f64(&mut r);
            total += w;
            atoms.push((p, w));
        }
        atoms.iter_mut().for_each(|a| a.1 /= total);
        starts.push(atoms);
    }
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for atoms in starts {
        let (v, s, converged) = away_step_fw(obj, atoms, opts);
        if best.as_ref().map_or(true, |b| v < b.0) {
            best = Some((v, s, !converged));
        }
    }
    let (value, s, approximate) = best.expect("at least one start");
    let argmin = DoublyStochastic::new(Matrix::from_vec(k, k, s)?)?;
    Ok(BirkhoffSolution { value, argmin, approximate })
}

fn away_step_fw(obj: &QuadraticObjective, mut active: Vec<(Vec<usize>, f64)>, opts: &BirkhoffOptions) -> (f64, Vec<f64>, bool) {
    let k = obj.k;
    let kk = k * k;
    let mut x = vec![0.0; kk];
    for (p, w) in &active {
        for (i, &j) in p.iter().enumerate() {
            x[i * k + j] += w;
        }
    }
    let tol = opts.tol * obj.scale();
    let mut value = obj.eval(&x);
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let g = obj.grad(&x);
        let gm = Matrix::from_vec(k, k, g.clone()).expect("k² gradient");
        let (fw_perm, _) = hungarian(&gm).expect("finite gradient");
        let fw = perm_vec(&fw_perm);
        let d_fw: Vec<f64> = fw.iter().zip(&x).map(|(a, b)| a - b).collect();
        let gap = -dot(&g, &d_fw);
        if gap <= tol {
            converged = true;
            break;
        }
        // away vertex: active atom with the largest gradient inner product
        let (away_idx, away_val) = active
            .iter()
            .enumerate()
            .map(|(i, (p, _))| (i, p.iter().enumerate().map(|(r, &c)| g[r * k + c]).sum::<f64>()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty active set");
        let x_g = dot(&g, &x);
        let away_gap = away_val - x_g;
        let (dir, gamma_max, is_fw) = if gap >= away_gap || active.len() == 1 {
            (d_fw, 1.0, true)
        } else {
            let w = active[away_idx].1;
            let away = perm_vec(&active[away_idx].0);
            let d: Vec<f64> = x.iter().zip(&away).map(|(a, b)| a - b).collect();
            (d, w / (1.0 - w), false)
        };
        let slope = dot(&g, &dir);
        let curv = obj.curvature(&dir);
        let gamma = if curv > 0.0 { (-slope / (2.0 * curv)).clamp(0.0, gamma_max) } else { gamma_max };
        if gamma <= 0.0 {
            converged = true;
            break;
        }
        let candidate: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + gamma * b).collect();
        let cand_val = obj.eval(&candidate);
        if cand_val > value {
            // rounding noise only; keep the monotone guarantee
            converged = true;
            break;
        }
        x = candidate;
        if is_fw {
            for a in active.iter_mut() {
                a.1 *= 1.0 - gamma;
            }
            if let Some(a) = active.iter_mut().find(|a| a.0 == fw_perm) {
                a.1 += gamma;
            } else {
                active.push((fw_perm, gamma));
            }
        } else {
            for a in active.iter_mut() {
                a.1 *= 1.0 + gamma;
            }
            active[away_idx].1 -= gamma;
        }
        active.retain(|a| a.1 > 1e-14);
        let total: f64 = active.iter().map(|a| a.1).sum();
        active.iter_mut().for_each(|a| a.1 /= total);
        // rebuild x from atoms to stay exactly inside the polytope
        x.iter_mut().for_each(|v| *v = 0.0);
        for (p, w) in &active {
            for (i, &j) in p.iter().enumerate() {
                x[i * k + j] += w;
            }
        }
        value = obj.eval(&x);
    }
    (value, x, converged)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `δ₂²(B, B0)` via the doubly stochastic characterisation.
pub fn delta_ds(b: &Matrix, b0: &Matrix, opts: &BirkhoffOptions) -> Result<BirkhoffSolution> {
    let obj = QuadraticObjective::from_pair(b, b0)?;
    minimize_quadratic_birkhoff(&obj, opts)
}

/// Exact `δ_ds` for `k = 2`, where the Birkhoff polytope is the segment
/// `S(s) = [[s, 1−s], [1−s, s]]`. Returns `(value, s)`.
pub fn delta_ds_exact_k2(b: &Matrix, b0: &Matrix) -> Result<(f64, f64)> {
    check_pair(b, b0)?;
    if b.rows() != 2 {
        return invalid("exact oracle is only for k = 2");
    }
    let obj = QuadraticObjective::from_pair(b, b0)?;
    let q = |s: f64| obj.eval(&[s, 1.0 - s, 1.0 - s, s]);
    let (q0, qh, q1) = (q(0.0), q(0.5), q(1.0));
    let a = 2.0 * (q1 + q0 - 2.0 * qh);
    let lin = q1 - q0 - a;
    let mut best = if q0 <= q1 { (q0, 0.0) } else { (q1, 1.0) };
    if a > 0.0 {
        let s = -lin / (2.0 * a);
        if s > 0.0 && s < 1.0 {
            let v = q(s);
            if v < best.0 {
                best = (v, s);
            }
        }
    }
    Ok((best.0.max(0.0), best.1))
}

/// `min over P1, P2 of (1/k) ‖P1 A P2 − B‖_F`, exact.
///
/// Enumerates `P1`; for fixed `P1` the best `P2` is a linear assignment.
pub fn delta_hat2(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_pair(a, b)?;
    let k = a.rows();
    if k > FACTORIAL_CAP {
        return capacity("k for permutation enumeration", k, FACTORIAL_CAP);
    }
    let mut best = f64::INFINITY;
    for p1 in Permutations::new(k) {
        // cost[j][c]: put column c of the row-permuted A at position j
        let cost = Matrix::from_fn(k, k, |j, c| (0..k).map(|i| (a[(p1[i], c)] - b[(i, j)]).powi(2)).sum());
        let (_, v) = hungarian(&cost)?;
        best = best.min(v);
    }
    Ok(best.max(0.0).sqrt() / k as f64)
}

/// `(1/k²) min over π of Σ (B(π i, π j) − B0(i, j))²`, exact.
pub fn delta_p(b: &Matrix, b0: &Matrix) -> Result<f64> {
    check_pair(b, b0)?;
    let k = b.rows();
    if k > FACTORIAL_CAP {
        return capacity("k for permutation enumeration", k, FACTORIAL_CAP);
    }
    let best = Permutations::new(k)
        .map(|p| {
            let mut s = 0.0;
            for i in 0..k {
                for j in 0..k {
                    s += (b[(p[i], p[j])] - b0[(i, j)]).powi(2);
                }
            }
            s
        })
        .fold(f64::INFINITY, f64::min);
    Ok(best / (k * k) as f64)
}

/// Step function `W[B]` written on `m` equal blocks (`k | m`).
pub fn refine(b: &Matrix, m: usize) -> Matrix {
    let r = m / b.rows();
    Matrix::from_fn(m, m, |i, j| b[(i / r, j / r)])
}

/// `δ₂(W1, W2)` on the common refinement.
pub fn delta2_block_graphons(w1: &BlockGraphon, w2: &BlockGraphon, opts: &BirkhoffOptions) -> Result<f64> {
    let m = lcm(w1.k(), w2.k());
    if m > REFINEMENT_CAP {
        return capacity("common refinement size", m, REFINEMENT_CAP);
    }
    let a = refine(w1.b.entries(), m);
    let b = refine(w2.b.entries(), m);
    let v = if m == 2 { delta_ds_exact_k2(&a, &b)?.0 } else { delta_ds(&a, &b, opts)?.value };
    Ok(v.max(0.0).sqrt())
}

/// `δ₂²` between two same-size matrices, using the closed form for `k = 2`.
pub fn delta2_sq(b: &Matrix, b0: &Matrix, opts: &BirkhoffOptions) -> Result<f64> {
    if b.rows() == 2 && b0.rows() == 2 {
        Ok(delta_ds_exact_k2(b, b0)?.0)
    } else {
        Ok(delta_ds(b, b0, opts)?.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_models::BlockMatrix;
    use crate::rng::{stream, unit_f64};

    fn m(rows: Vec<Vec<f64>>) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn rand_sym(k: usize, r: &mut rng::Rng) -> Matrix {
        let mut a = Matrix::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                let v = unit_f64(r) * 3.0;
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    fn quick() -> BirkhoffOptions {
        BirkhoffOptions { restarts: 16, ..Default::default() }
    }

    #[test]
    fn identical_is_zero() {
        let b = m(vec![vec![1.0, 2.0, 0.5], vec![2.0, 0.0, 1.0], vec![0.5, 1.0, 3.0]]);
        let sol = delta_ds(&b, &b, &quick()).unwrap();
        assert!(sol.value.abs() < 1e-12);
        assert_eq!(delta_p(&b, &b).unwrap(), 0.0);
        assert_eq!(delta_hat2(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn one_by_one() {
        let b = m(vec![vec![3.0]]);
        let b0 = m(vec![vec![1.0]]);
        assert!((delta_ds(&b, &b0, &quick()).unwrap().value - 4.0).abs() < 1e-12);
        assert_eq!(delta_p(&b, &b0).unwrap(), 4.0);
        assert_eq!(delta_hat2(&b, &b0).unwrap(), 2.0);
    }

    #[test]
    fn swap_permutation_k2() {
        let b = m(vec![vec![2.0, 0.0], vec![0.0, 2.0]]);
        let b0 = m(vec![vec![0.0, 2.0], vec![2.0, 0.0]]);
        // B0 is not a relabelling of B, but the swapped pair is
        let (v, _) = delta_ds_exact_k2(&b, &b).unwrap();
        assert_eq!(v, 0.0);
        let bb = m(vec![vec![2.0, 0.5], vec![0.5, 1.0]]);
        let swapped = m(vec![vec![1.0, 0.5], vec![0.5, 2.0]]);
        let (v, s) = delta_ds_exact_k2(&bb, &swapped).unwrap();
        assert!(v.abs() < 1e-15 && s == 0.0);
        assert!(delta_ds_exact_k2(&b, &b0).unwrap().0 > 0.0);
    }

    #[test]
    fn exact_k2_matches_fine_grid() {
        let mut r = stream(2, 0);
        for _ in 0..20 {
            let b = rand_sym(2, &mut r);
            let b0 = rand_sym(2, &mut r);
            let obj = QuadraticObjective::from_pair(&b, &b0).unwrap();
            let grid = (0..=100_000)
                .map(|i| {
                    let s = i as f64 * 1e-5;
                    obj.eval(&[s, 1.0 - s, 1.0 - s, s])
                })
                .fold(f64::INFINITY, f64::min);
            let (v, _) = delta_ds_exact_k2(&b, &b0).unwrap();
            assert!(v <= grid + 1e-12 && grid - v < 1e-8, "{v} vs {grid}");
        }
    }

    #[test]
    fn fw_matches_exact_k2() {
        let mut r = stream(3, 0);
        for i in 0..200 {
            let b = rand_sym(2, &mut r);
            let b0 = rand_sym(2, &mut r);
            let fw = delta_ds(&b, &b0, &BirkhoffOptions { seed: i, ..quick() }).unwrap();
            let (ex, _) = delta_ds_exact_k2(&b, &b0).unwrap();
            assert!((fw.value - ex).abs() <= 1e-6, "{} vs {}", fw.value, ex);
        }
    }

    #[test]
    fn linear_objective_hits_assignment_vertex() {
        let k = 3;
        let c = vec![3.0, 1.0, 2.0, 2.0, 0.5, 4.0, 1.0, 2.0, 0.0];
        let obj = QuadraticObjective::new(k, Matrix::zeros(9, 9), c.clone(), 0.0).unwrap();
        let sol = minimize_quadratic_birkhoff(&obj, &quick()).unwrap();
        let (_, best) = hungarian(&Matrix::from_vec(3, 3, c).unwrap()).unwrap();
        assert!((sol.value - best).abs() < 1e-12);
        assert!(sol.argmin.entries.data().iter().all(|&v| v.abs() < 1e-12 || (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn centered_objective_reaches_uniform() {
        // ‖S − J/k‖² = sᵀs − (2/k) Σ s + 1
        let k = 3;
        let obj = QuadraticObjective::new(k, Matrix::identity(9), vec![-2.0 / 3.0; 9], 1.0).unwrap();
        let sol = minimize_quadratic_birkhoff(&obj, &quick()).unwrap();
        assert!(sol.value.abs() < 1e-7, "{}", sol.value);
        assert!(sol.argmin.entries.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-3));
    }

    #[test]
    fn sandwich_and_relation_k3() {
        let mut r = stream(4, 0);
        for i in 0..30 {
            let b = rand_sym(3, &mut r);
            let b0 = rand_sym(3, &mut r);
            let ds = delta_ds(&b, &b0, &BirkhoffOptions { seed: i, ..quick() }).unwrap().value;
            let p = delta_p(&b, &b0).unwrap();
            let h = delta_hat2(&b, &b0).unwrap();
            assert!(h * h <= ds * (1.0 + 1e-6) + 1e-12);
            assert!(ds <= p + 1e-12);
            assert!(p <= 81.0 * ds + 1e-9);
            let swapped = delta_ds(&b0, &b, &BirkhoffOptions { seed: i, ..quick() }).unwrap().value;
            assert!((ds - swapped).abs() < 1e-6);
        }
    }

    #[test]
    fn delta_hat2_matches_double_enumeration() {
        let mut r = stream(5, 0);
        for _ in 0..10 {
            let a = rand_sym(3, &mut r);
            let b = rand_sym(3, &mut r);
            let mut best = f64::INFINITY;
            for p1 in Permutations::new(3) {
                for p2 in Permutations::new(3) {
                    best = best.min(a.permuted(&p1, &p2).sub(&b).frobenius() / 3.0);
                }
            }
            assert!((delta_hat2(&a, &b).unwrap() - best).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariance_and_scaling() {
        let b = m(vec![vec![1.0, 2.0, 0.5], vec![2.0, 0.0, 1.0], vec![0.5, 1.0, 3.0]]);
        let b0 = m(vec![vec![2.0, 0.1, 0.5], vec![0.1, 1.0, 1.0], vec![0.5, 1.0, 0.2]]);
        for p in Permutations::new(3) {
            let pb = b.permuted(&p, &p);
            assert!(delta_ds(&pb, &b, &quick()).unwrap().value < 1e-10);
        }
        let base = delta_ds(&b, &b0, &quick()).unwrap().value;
        let scaled = delta_ds(&b.scale(2.5), &b0.scale(2.5), &quick()).unwrap().value;
        assert!((scaled - 6.25 * base).abs() < 1e-6);
    }

    #[test]
    fn graphon_distance() {
        let g = |rows: Vec<Vec<f64>>| BlockGraphon::new(BlockMatrix::from_rows(rows, 10.0).unwrap());
        let w = g(vec![vec![2.0, 0.5], vec![0.5, 1.0]]);
        assert!(delta2_block_graphons(&w, &w, &quick()).unwrap() < 1e-9);
        let c1 = g(vec![vec![1.5]]);
        let c2 = g(vec![vec![0.25]]);
        assert!((delta2_block_graphons(&c1, &c2, &quick()).unwrap() - 1.25).abs() < 1e-9);
        let w4 = g(refine(w.b.entries(), 4).to_rows());
        assert!(delta2_block_graphons(&w, &w4, &quick()).unwrap() < 1e-6);
        let w3 = g(vec![vec![1.0; 3]; 3]);
        assert!(delta2_block_graphons(&w, &w3, &quick()).is_ok());
    }

    #[test]
    fn capacity_errors() {
        let big = Matrix::zeros(7, 7);
        assert!(matches!(delta_p(&big, &big), Err(Error::Capacity { .. })));
        assert!(matches!(delta_hat2(&big, &big), Err(Error::Capacity { .. })));
        assert!(delta_ds(&Matrix::zeros(2, 2), &Matrix::zeros(3, 3), &quick()).is_err());
    }
}
