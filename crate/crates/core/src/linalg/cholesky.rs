//! Dense Cholesky factorization for symmetric positive definite systems.

use super::Matrix;
use crate::error::{Error, Result};

/// Dot product with independent partial sums, which lets the compiler vectorise.
#[inline]
fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Lower-triangular factor `L` with `A = L Lᵀ`, stored row-major.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn new(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension("Cholesky needs a square matrix".into()));
        }
        let n = a.rows();
        let mut l = a.data().to_vec();
        for j in 0..n {
            let mut d = l[j * n + j];
            d -= dot_lanes(&l[j * n..j * n + j], &l[j * n..j * n + j]);
            if !(d > 0.0) {
                return Err(Error::Solver(format!("matrix not positive definite at pivot {j}")));
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            let (head, tail) = l.split_at_mut((j + 1) * n);
            let row_j = &head[j * n..j * n + j];
            for i in j + 1..n {
                let row_i = &mut tail[(i - j - 1) * n..(i - j) * n];
                let s = dot_lanes(&row_i[..j], row_j);
                row_i[j] = (row_i[j] - s) / d;
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                l[i * n + j] = 0.0;
            }
        }
        Ok(Cholesky { n, l })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `log det A`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.n;
        let mut inv = Matrix::zeros(n, n);
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.iter_mut().for_each(|x| *x = 0.0);
            col[j] = 1.0;
            self.solve(&mut col);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }

    /// Solves `A x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let s: f64 = self.l[i * n..i * n + i].iter().zip(&b[..i]).map(|(a, x)| a * x).sum();
            b[i] = (b[i] - s) / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for p in i + 1..n {
                s -= self.l[p * n + i] * b[p];
            }
            b[i] = s / self.l[i * n + i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let b = Matrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let a = b.transpose().matmul(&b).add(&Matrix::identity(5));
        let x: Vec<f64> = (0..5).map(|i| i as f64 - 1.5).collect();
        let mut rhs = a.matvec(&x);
        Cholesky::new(&a).unwrap().solve(&mut rhs);
        for (u, v) in rhs.iter().zip(&x) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn inverse_and_log_det() {
        let a = Matrix::from_rows(vec![vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let c = Cholesky::new(&a).unwrap();
        assert!((c.log_det() - 8f64.ln()).abs() < 1e-12);
        let prod = a.matmul(&c.inverse());
        assert!(prod.sub(&Matrix::identity(2)).max_abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        let a = Matrix::from_rows(vec![vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(Cholesky::new(&a).is_err());
    }
}
