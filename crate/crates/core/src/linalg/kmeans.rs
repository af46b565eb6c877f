//! k-means with an optional equal-size constraint.

use super::assign::capacitated_assignment;
use super::matrix::Matrix;
use crate::error::{invalid, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug)]
pub struct KMeansOptions {
    pub balanced: bool,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions { balanced: true, restarts: 10, max_iter: 100, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centers: Matrix,
    pub cost: f64,
}

/// Lloyd iterations from farthest-point and k-means++ seeds; keeps the best
/// of `restarts` runs. With `balanced`, every cluster gets exactly `n / k`
/// points (requires `k | n`) and the assignment step is solved exactly.
pub fn kmeans(points: &Matrix, k: usize, opts: &KMeansOptions) -> Result<KMeans> {
    let n = points.rows();
    if k == 0 || k > n {
        return invalid(format!("k-means with k={k} on {n} points"));
    }
    if opts.balanced && n % k != 0 {
        return invalid(format!("balanced k-means needs k | n (n={n}, k={k})"));
    }
    let mut rng = rng::stream(opts.seed, rng::streams::SOLVER);
    let mut best: Option<KMeans> = None;
    for restart in 0..opts.restarts.max(1) {
        let init = if restart == 0 { farthest_point_init(points, k) } else { plus_plus_init(points, k, &mut rng) };
        let run = lloyd(points, k, init, opts)?;
        if best.as_ref().map_or(true, |b| run.cost < b.cost - 1e-12) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn balanced_kmeans(points: &Matrix, k: usize, seed: u64) -> Result<KMeans> {
    kmeans(points, k, &KMeansOptions { seed, ..Default::default() })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn farthest_point_init(points: &Matrix, k: usize) -> Matrix {
    let n = points.rows();
    let p = points.cols();
    let mut mean = vec![0.0; p];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(points.row(i)) {
            *m += x / n as f64;
        }
    }
    let first = (0..n)
        .max_by(|&a, &b| sq_dist(points.row(a), &mean).total_cmp(&sq_dist(points.row(b), &mean)))
        .unwrap();
    let mut chosen = vec![first];
    let mut d: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    while chosen.len() < k {
        let next = (0..n).max_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
        chosen.push(next);
        for i in 0..n {
            d[i] = d[i].min(sq_dist(points.row(i), points.row(next)));
        }
    }
    Matrix::from_fn(k, p, |c, j| points[(chosen[c], j)])
}

fn plus_plus_init(points: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = points.rows();
    let p = points.cols();
    let mut chosen = vec![rng::uniform_index(rng, n)];
    let mut d: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            rng::uniform_index(rng, n)
        } else {
            let mut target = rng::unit_f64(rng) * total;
            let mut pick = n - 1;
            for (i, di) in d.iter().enumerate() {
                if target < *di {
                    pick = i;
                    break;
                }
                target -= di;
            }
            pick
        };
        chosen.push(next);
        for i in 0..n {
            d[i] = d[i].min(sq_dist(points.row(i), points.row(next)));
        }
    }
    Matrix::from_fn(k, p, |c, j| points[(chosen[c], j)])
}

fn lloyd(points: &Matrix, k: usize, mut centers: Matrix, opts: &KMeansOptions) -> Result<KMeans> {
    let n = points.rows();
    let p = points.cols();
    let cap = vec![n / k; k];
    let mut labels = vec![usize::MAX; n];
    for _ in 0..opts.max_iter.max(1) {
        let cost = Matrix::from_fn(n, k, |i, c| sq_dist(points.row(i), centers.row(c)));
        let next = if opts.balanced {
            capacitated_assignment(&cost, &cap)?
        } else {
            (0..n).map(|i| (0..k).min_by(|&a, &b| cost[(i, a)].total_cmp(&cost[(i, b)])).unwrap()).collect()
        };
        let changed = next != labels;
        labels = next;
        let mut sums = Matrix::zeros(k, p);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, x) in sums.row_mut(labels[i]).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums.row_mut(c) {
                    *s /= counts[c] as f64;
                }
            } else {
                sums.row_mut(c).copy_from_slice(centers.row(c));
            }
        }
        centers = sums;
        if !changed {
            break;
        }
    }
    let cost = (0..n).map(|i| sq_dist(points.row(i), centers.row(labels[i]))).sum();
    Ok(KMeans { labels, centers, cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::perm::next_permutation;
    use crate::rng::{stream, unit_f64};

    fn partition_cost(points: &Matrix, labels: &[usize], k: usize) -> f64 {
        let p = points.cols();
        let mut cost = 0.0;
        for c in 0..k {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let mut mean = vec![0.0; p];
            for &i in &members {
                for (m, x) in mean.iter_mut().zip(points.row(i)) {
                    *m += x / members.len() as f64;
                }
            }
            cost += members.iter().map(|&i| sq_dist(points.row(i), &mean)).sum::<f64>();
        }
        cost
    }

    #[test]
    fn balanced_matches_exhaustive_small() {
        let mut r = stream(21, 0);
        for _ in 0..25 {
            let pts = Matrix::from_fn(8, 2, |_, _| unit_f64(&mut r));
            let km = balanced_kmeans(&pts, 2, 1).unwrap();
            let mut labels = vec![0, 0, 0, 0, 1, 1, 1, 1];
            let mut best = f64::INFINITY;
            loop {
                best = best.min(partition_cost(&pts, &labels, 2));
                if !next_permutation(&mut labels) {
                    break;
                }
            }
            assert!((km.cost - best).abs() < 1e-9, "{} vs {}", km.cost, best);
            assert_eq!(km.labels.iter().filter(|&&l| l == 0).count(), 4);
        }
    }

    #[test]
    fn separates_obvious_clusters() {
        let pts = Matrix::from_fn(6, 1, |i, _| if i % 2 == 0 { 0.0 + i as f64 * 0.01 } else { 10.0 });
        let km = balanced_kmeans(&pts, 2, 0).unwrap();
        assert_eq!(km.labels[0], km.labels[2]);
        assert_ne!(km.labels[0], km.labels[1]);
    }

    #[test]
    fn rejects_indivisible() {
        let pts = Matrix::zeros(5, 1);
        assert!(balanced_kmeans(&pts, 2, 0).is_err());
    }
}
