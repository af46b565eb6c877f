//! Numerical checks of the inequalities behind the utility analysis.
//!
//! Each function returns the slack `rhs − lhs` (nonnegative when the
//! inequality holds) on one randomised instance drawn from `rng`.

use rand::Rng as _;

use crate::error::Result;
use crate::graph_models::{BlockMatrix, CommunityMembership};
use crate::linalg::{sym_eig, Matrix, SymmetricMatrix};
use crate::rng::Rng;
use crate::scoring::{f_objective, Equipartitions};

/// Constant standing in for the unspecified `≲` of the robust identifiability bound.
pub const IDENTIFIABILITY_TWO_CONSTANT: f64 = 100.0;

fn random_block(k: usize, r: f64, rng: &mut Rng) -> BlockMatrix {
    let mut m = Matrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let v = rng.gen_range(0.0..r);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    BlockMatrix::new(m, r).expect("entries drawn inside the box")
}

fn random_symmetric(n: usize, scale: f64, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = rng.gen_range(-scale..scale);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn gram(z: &CommunityMembership, b: &BlockMatrix) -> Matrix {
    let n = z.n();
    Matrix::from_fn(n, n, |i, j| b.get(z.label(i), z.label(j)))
}

pub fn op_norm_sq(m: &Matrix) -> Result<f64> {
    let s = SymmetricMatrix::from_fn(m.rows(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let e = sym_eig(&s)?;
    let top = e.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(top * top)
}

fn l1(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v.abs()).sum()
}

/// `‖ZBZᵀ − Y₀‖²_F ≤ 48k‖Yin − Y₀‖² + 4(f(Z₀;B₀,Yin) − f(Z;B,Yin))`, minimised over every equipartition `Z`.
pub fn identifiability_one_slack(n: usize, k: usize, r: f64, noise: f64, rng: &mut Rng) -> Result<f64> {
    let z0 = CommunityMembership::random(n, k, rng)?;
    let b0 = random_block(k, r, rng);
    let b = random_block(k, r, rng);
    let y0 = gram(&z0, &b0);
    let yin = y0.add(&random_symmetric(n, noise, rng));
    let spec = 48.0 * k as f64 * op_norm_sq(&yin.sub(&y0))?;
    let f0 = f_objective(&z0, &b0, &yin)?;
    let mut worst = f64::INFINITY;
    for z in Equipartitions::new(n, k)? {
        let lhs = gram(&z, &b).sub(&y0).frobenius_sq();
        let rhs = spec + 4.0 * (f0 - f_objective(&z, &b, &yin)?);
        worst = worst.min(rhs - lhs);
    }
    Ok(worst)
}

/// `‖ZBZᵀ − Y₀‖²_F ≤ C(k‖Y₁−Y₀‖² + ‖Y₂−Y₁‖²_F + R‖Yin−Y₂‖₁ + ν)` with
/// `ν = max(0, f(Z₀;B₀,Y₂) − t)` and `t = f(Z;B,Yin)`, over every equipartition `Z`.
pub fn identifiability_two_slack(n: usize, k: usize, r: f64, noise: f64, rng: &mut Rng) -> Result<f64> {
    let z0 = CommunityMembership::random(n, k, rng)?;
    let b0 = random_block(k, r, rng);
    let b = random_block(k, r, rng);
    let y0 = gram(&z0, &b0);
    let y1 = y0.add(&random_symmetric(n, noise, rng));
    let y2 = y1.add(&random_symmetric(n, noise, rng));
    // sparse large corruptions for the ℓ₁ part
    let mut yin = y2.clone();
    for _ in 0..n {
        let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let v = rng.gen_range(-4.0 * r..4.0 * r);
        yin[(i, j)] += v;
        if i != j {
            yin[(j, i)] += v;
        }
    }
    let base = k as f64 * op_norm_sq(&y1.sub(&y0))? + y2.sub(&y1).frobenius_sq() + r * l1(&yin.sub(&y2));
    let f0 = f_objective(&z0, &b0, &y2)?;
    let mut worst = f64::INFINITY;
    for z in Equipartitions::new(n, k)? {
        let t = f_objective(&z, &b, &yin)?;
        let nu = (f0 - t).max(0.0);
        let lhs = gram(&z, &b).sub(&y0).frobenius_sq();
        worst = worst.min(IDENTIFIABILITY_TWO_CONSTANT * (base + nu) - lhs);
    }
    Ok(worst)
}

/// Random `n × k` matrix with orthonormal columns (Gram–Schmidt).
fn random_orthonormal(n: usize, k: usize, rng: &mut Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv > 1e-8 {
            cols.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    Matrix::from_fn(n, k, |i, j| cols[j][i])
}

/// `⟨M, W⟩ ≤ 3/2 ‖M‖²_F + 2k ‖W‖²` for `M` with `(I − VVᵀ) M (I − V₀V₀ᵀ) = 0`.
pub fn spectral_holder_slack(n: usize, k: usize, rng: &mut Rng) -> Result<f64> {
    let v = random_orthonormal(n, k, rng);
    let v0 = random_orthonormal(n, k, rng);
    let p = v.matmul(&v.transpose());
    let p0 = v0.matmul(&v0.transpose());
    let x = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let scale = rng.gen_range(0.01..3.0);
    // M = P X + (I − P) X P₀ keeps the two-sided projection zero
    let m = p.matmul(&x).add(&Matrix::identity(n).sub(&p).matmul(&x).matmul(&p0)).scale(scale);
    let w = random_symmetric(n, rng.gen_range(0.01..3.0), rng);
    Ok(1.5 * m.frobenius_sq() + 2.0 * k as f64 * op_norm_sq(&w)? - m.inner(&w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn inequalities_hold_on_a_few_instances() {
        let mut rng = stream(1, 0);
        for _ in 0..20 {
            assert!(identifiability_one_slack(6, 2, 2.0, 1.0, &mut rng).unwrap() >= -1e-6);
            assert!(identifiability_two_slack(6, 2, 2.0, 1.0, &mut rng).unwrap() >= -1e-6);
            assert!(spectral_holder_slack(8, 2, &mut rng).unwrap() >= -1e-9);
        }
    }

    #[test]
    fn projection_constraint_holds() {
        let mut rng = stream(2, 0);
        let v = random_orthonormal(7, 3, &mut rng);
        let g = v.transpose().matmul(&v);
        assert!(g.sub(&Matrix::identity(3)).max_abs() < 1e-12);
    }
}
