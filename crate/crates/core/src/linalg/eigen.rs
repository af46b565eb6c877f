//! Symmetric eigen-solvers.
//!
//! Cyclic Jacobi for small dense problems, Householder tridiagonalisation plus
//! implicit QL for larger ones, and a Lanczos iteration (full
//! reorthogonalisation) when only a few extreme eigenpairs are needed.

use super::matrix::{dot, norm, Matrix, SymmetricMatrix};
use crate::error::{capacity, Error, Result};
use crate::rng;

/// Above this size `sym_eig` switches from Jacobi to tridiagonal QL.
pub const JACOBI_MAX_N: usize = 400;
/// Dense decompositions beyond this size are refused.
pub const DENSE_MAX_N: usize = 4000;

/// Eigenvalues in descending order; column `j` of `vectors` pairs with `values[j]`.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEigen {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        (0..self.vectors.rows()).map(|i| self.vectors[(i, j)]).collect()
    }

    pub fn min_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

pub fn sym_eig(a: &SymmetricMatrix) -> Result<SymEigen> {
    let n = a.n();
    if n > DENSE_MAX_N {
        return capacity("dense eigen-decomposition size", n, DENSE_MAX_N);
    }
    if n <= JACOBI_MAX_N {
        jacobi_eig(a)
    } else {
        ql_eig(a)
    }
}

pub fn jacobi_eig(a: &SymmetricMatrix) -> Result<SymEigen> {
    let n = a.n();
    let mut m = a.to_matrix();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_sq();
    if scale == 0.0 || !scale.is_finite() {
        if !scale.is_finite() {
            return Err(Error::InvalidInput("non-finite matrix entries".into()));
        }
        return Ok(sorted(vec![0.0; n], v));
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| m[(i, i)]).collect();
    Ok(sorted(values, v))
}

/// Householder reduction followed by implicit QL (EISPACK tred2/tql2).
pub fn ql_eig(a: &SymmetricMatrix) -> Result<SymEigen> {
    let n = a.n();
    if n == 0 {
        return Ok(SymEigen { values: vec![], vectors: Matrix::zeros(0, 0) });
    }
    let mut v = a.to_matrix();
    if v.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite matrix entries".into()));
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e);
    // tql2 rotates columns of v; work on the transpose so the rotations touch
    // contiguous rows.
    let mut vt = v.transpose();
    tql2(&mut vt, &mut d, &mut e)?;
    Ok(sorted(d, vt.transpose()))
}

/// Eigenvalues and eigenvectors of a symmetric tridiagonal matrix.
pub fn tridiagonal_eig(diag: &[f64], off: &[f64]) -> Result<SymEigen> {
    let n = diag.len();
    let mut d = diag.to_vec();
    let mut e = vec![0.0; n];
    e[1..n].copy_from_slice(&off[..n - 1]);
    let mut vt = Matrix::identity(n);
    tql2(&mut vt, &mut d, &mut e)?;
    Ok(sorted(d, vt.transpose()))
}

fn sorted(values: Vec<f64>, vectors: Matrix) -> SymEigen {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = order.iter().map(|&i| values[i]).collect();
    let vecs = Matrix::from_fn(vectors.rows(), n, |r, c| vectors[(r, order[c])]);
    SymEigen { values: vals, vectors: vecs }
}

fn tred2(v: &mut Matrix, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
                v[(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for j in 0..i {
                e[j] = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[(j, i)] = f;
                g = e[j] + v[(j, j)] * f;
                for k in j + 1..i {
                    g += v[(k, j)] * d[k];
                    e[k] += v[(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[(n - 1, i)] = v[(i, i)];
        v[(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[(k, i + 1)] * v[(k, j)];
                }
                for k in 0..=i {
                    v[(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1, j)];
        v[(n - 1, j)] = 0.0;
    }
    v[(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// `vt` holds eigenvectors as rows.
fn tql2(vt: &mut Matrix, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 300 {
                    return Err(Error::Solver("QL iteration did not converge".into()));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let cols = vt.cols();
                    let (lo, hi) = vt.data_mut().split_at_mut((i + 1) * cols);
                    let row_i = &mut lo[i * cols..];
                    let row_i1 = &mut hi[..cols];
                    for (a, b) in row_i.iter_mut().zip(row_i1.iter_mut()) {
                        let hk = *b;
                        *b = s * *a + c * hk;
                        *a = c * *a - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// A symmetric linear operator, for iterative solvers.
pub trait SymOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl SymOperator for Matrix {
    fn dim(&self) -> usize {
        self.rows()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = dot(self.row(i), x);
        }
    }
}

impl SymOperator for SymmetricMatrix {
    fn dim(&self) -> usize {
        self.n()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(&self.matvec(x));
    }
}

/// Partial eigendecomposition: the `k` eigenpairs of largest `|λ|`, ordered by
/// descending `|λ|`. Vectors are the columns of an `n × k` matrix.
pub fn top_abs_eig(op: &dyn SymOperator, k: usize, seed: u64) -> Result<SymEigen> {
    let n = op.dim();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("cannot take {k} eigenpairs of a {n}x{n} operator")));
    }
    if n <= 64 {
        let mut dense = Matrix::zeros(n, n);
        let mut col = vec![0.0; n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            op.apply(&e, &mut col);
            for i in 0..n {
                dense[(i, j)] = col[i];
            }
        }
        let full = ql_eig(&SymmetricMatrix::from_fn(n, |i, j| 0.5 * (dense[(i, j)] + dense[(j, i)])))?;
        return Ok(select_abs(&full, k));
    }
    let mut steps = (4 * k + 40).min(n);
    loop {
        let (ritz, resid, op_norm) = lanczos(op, steps, seed)?;
        let chosen = select_abs(&ritz, k);
        let idx = abs_order(&ritz.values);
        let worst = idx[..k].iter().map(|&j| resid[j]).fold(0.0, f64::max);
        if worst <= 1e-10 * op_norm.max(1e-300) || steps == n {
            return Ok(chosen);
        }
        steps = (steps * 2).min(n);
    }
}

/// Largest `|λ|`.
pub fn spectral_norm(op: &dyn SymOperator, seed: u64) -> Result<f64> {
    let e = top_abs_eig(op, 1, seed)?;
    Ok(e.values[0].abs())
}

fn abs_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().partial_cmp(&values[a].abs()).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

fn select_abs(e: &SymEigen, k: usize) -> SymEigen {
    let idx = abs_order(&e.values);
    let rows = e.vectors.rows();
    SymEigen {
        values: idx[..k].iter().map(|&j| e.values[j]).collect(),
        vectors: Matrix::from_fn(rows, k, |r, c| e.vectors[(r, idx[c])]),
    }
}

/// Lanczos with full reorthogonalisation. Returns Ritz pairs (vectors in the
/// original space), their residual norms, and an estimate of the operator norm.
fn lanczos(op: &dyn SymOperator, steps: usize, seed: u64) -> Result<(SymEigen, Vec<f64>, f64)> {
    let n = op.dim();
    let mut r = rng::stream(seed, rng::streams::SOLVER);
    let mut q: Vec<f64> = (0..n).map(|_| rng::unit_f64(&mut r) - 0.5).collect();
    let nq = norm(&q);
    q.iter_mut().for_each(|v| *v /= nq);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut beta: Vec<f64> = Vec::with_capacity(steps);
    let mut w = vec![0.0; n];
    let mut last_beta = 0.0;
    for j in 0..steps {
        op.apply(&q, &mut w);
        let a = dot(&w, &q);
        alpha.push(a);
        for (wi, qi) in w.iter_mut().zip(&q) {
            *wi -= a * qi;
        }
        if let Some(prev) = basis.last() {
            let b = beta[j - 1];
            for (wi, pi) in w.iter_mut().zip(prev) {
                *wi -= b * pi;
            }
        }
        basis.push(q.clone());
        // two passes of classical Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for v in &basis {
                let c = dot(&w, v);
                for (wi, vi) in w.iter_mut().zip(v) {
                    *wi -= c * vi;
                }
            }
        }
        let b = norm(&w);
        last_beta = b;
        if j + 1 == steps {
            break;
        }
        if b <= 1e-12 * alpha.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300) {
            // invariant subspace: restart with a fresh direction orthogonal to the basis
            let mut fresh: Vec<f64> = (0..n).map(|_| rng::unit_f64(&mut r) - 0.5).collect();
            for _ in 0..2 {
                for v in &basis {
                    let c = dot(&fresh, v);
                    for (fi, vi) in fresh.iter_mut().zip(v) {
                        *fi -= c * vi;
                    }
                }
            }
            let nf = norm(&fresh);
            if nf < 1e-12 {
                last_beta = 0.0;
                break;
            }
            beta.push(0.0);
            q = fresh.into_iter().map(|v| v / nf).collect();
            continue;
        }
        beta.push(b);
        q = w.iter().map(|v| v / b).collect();
    }
    let m = alpha.len();
    let t = tridiagonal_eig(&alpha, &beta)?;
    let op_norm = t.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut vectors = Matrix::zeros(n, m);
    let mut resid = Vec::with_capacity(m);
    for c in 0..m {
        resid.push((last_beta * t.vectors[(m - 1, c)]).abs());
        for (j, bj) in basis.iter().enumerate() {
            let s = t.vectors[(j, c)];
            if s == 0.0 {
                continue;
            }
            for i in 0..n {
                vectors[(i, c)] += s * bj[i];
            }
        }
    }
    Ok((SymEigen { values: t.values, vectors }, resid, op_norm))
}

/// Best rank-`k` approximation by `|λ|` truncation.
pub fn rank_k_truncate(m: &SymmetricMatrix, k: usize, seed: u64) -> Result<Matrix> {
    let n = m.n();
    let e = if n <= JACOBI_MAX_N { select_abs(&sym_eig(m)?, k.min(n)) } else { top_abs_eig(m, k, seed)? };
    Ok(reconstruct(&e))
}

/// `V diag(λ) Vᵀ` from (partial) eigenpairs.
pub fn reconstruct(e: &SymEigen) -> Matrix {
    let n = e.vectors.rows();
    let k = e.values.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for c in 0..k {
                s += e.values[c] * e.vectors[(i, c)] * e.vectors[(j, c)];
            }
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    out
}
