//! Small linear programs.
//!
//! The capacitated "keep as much weight as possible" problems that appear in
//! the Lipschitz extensions all have the form
//!
//! ```text
//! max Σ_ij w_ij y_ij   s.t.  0 ≤ y ≤ U,  Σ_j y_ij ≤ c_i,  y = yᵀ
//! ```
//!
//! with `w`, `U` symmetric and nonnegative. Dropping symmetry and adding the
//! (implied) column bounds gives a bipartite transportation problem whose
//! optimum can always be symmetrised without loss, so both problems share the
//! same value. We solve it as a min-cost flow, and keep a plain simplex on the
//! upper-triangular variables as an independent cross-check.

use std::collections::VecDeque;

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

/// Dense simplex for `max cᵀx  s.t.  A x ≤ b, x ≥ 0` with `b ≥ 0`.
/// Bland's rule, so it terminates on degenerate problems.
pub fn simplex_max(c: &[f64], a: &Matrix, b: &[f64]) -> Result<(f64, Vec<f64>)> {
    let m = a.rows();
    let n = a.cols();
    if c.len() != n || b.len() != m {
        return Err(Error::Dimension("simplex: shape mismatch".into()));
    }
    if b.iter().any(|&v| v < 0.0) {
        return invalid("simplex: right-hand side must be nonnegative");
    }
    // tableau rows 0..m constraints, row m objective (reduced costs)
    let w = n + m + 1;
    let mut t = vec![0.0; (m + 1) * w];
    for i in 0..m {
        for j in 0..n {
            t[i * w + j] = a[(i, j)];
        }
        t[i * w + n + i] = 1.0;
        t[i * w + w - 1] = b[i];
    }
    for j in 0..n {
        t[m * w + j] = -c[j];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    let eps = 1e-12;
    for _ in 0..50_000 {
        // Bland: smallest index with negative reduced cost
        let Some(enter) = (0..n + m).find(|&j| t[m * w + j] < -eps) else {
            let mut x = vec![0.0; n];
            for (i, &bv) in basis.iter().enumerate() {
                if bv < n {
                    x[bv] = t[i * w + w - 1];
                }
            }
            return Ok((t[m * w + w - 1], x));
        };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            let aij = t[i * w + enter];
            if aij > eps {
                let ratio = t[i * w + w - 1] / aij;
                match leave {
                    None => leave = Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < lr - eps || (ratio <= lr + eps && basis[i] < basis[li]) {
                            leave = Some((i, ratio));
                        }
                    }
                }
            }
        }
        let Some((row, _)) = leave else {
            return Err(Error::Solver("simplex: unbounded".into()));
        };
        let piv = t[row * w + enter];
        for j in 0..w {
            t[row * w + j] /= piv;
        }
        for i in 0..=m {
            if i == row {
                continue;
            }
            let f = t[i * w + enter];
            if f != 0.0 {
                for j in 0..w {
                    t[i * w + j] -= f * t[row * w + j];
                }
            }
        }
        basis[row] = enter;
    }
    Err(Error::Solver("simplex: iteration cap".into()))
}

#[derive(Clone, Copy, Debug)]
struct Arc {
    to: usize,
    cap: f64,
    cost: f64,
}

/// Residual network used by both flow routines.
struct Network {
    arcs: Vec<Arc>,
    out: Vec<Vec<usize>>,
}

impl Network {
    fn new(nodes: usize) -> Self {
        Network { arcs: Vec::new(), out: vec![Vec::new(); nodes] }
    }

    fn add(&mut self, from: usize, to: usize, cap: f64, cost: f64) {
        self.out[from].push(self.arcs.len());
        self.arcs.push(Arc { to, cap, cost });
        self.out[to].push(self.arcs.len());
        self.arcs.push(Arc { to: from, cap: 0.0, cost: -cost });
    }
}

const FLOW_EPS: f64 = 1e-12;

/// Value of `max Σ w_ij y_ij` over the symmetric capacitated polytope above.
/// `w` and `upper` must be symmetric and nonnegative; `row_cap[i] ≥ 0`.
pub fn capacitated_weight_max(w: &Matrix, upper: &Matrix, row_cap: &[f64]) -> Result<f64> {
    Ok(capacitated_weight_argmax(w, upper, row_cap)?.0)
}

/// Optimal value and a symmetric maximiser `y`.
pub fn capacitated_weight_argmax(w: &Matrix, upper: &Matrix, row_cap: &[f64]) -> Result<(f64, Matrix)> {
    let n = w.rows();
    if upper.rows() != n || row_cap.len() != n || !w.is_square() || !upper.is_square() {
        return Err(Error::Dimension("capacitated weight problem shape".into()));
    }
    if row_cap.iter().any(|&c| c < 0.0) || upper.data().iter().any(|&u| u < 0.0) {
        return invalid("capacities must be nonnegative");
    }
    // nodes: 0 source, 1..=n rows, n+1..=2n columns, 2n+1 sink
    let s = 0;
    let t = 2 * n + 1;
    let mut net = Network::new(2 * n + 2);
    let mut pair_arcs = Vec::new();
    for i in 0..n {
        net.add(s, 1 + i, row_cap[i], 0.0);
        net.add(1 + n + i, t, row_cap[i], 0.0);
        for j in 0..n {
            if upper[(i, j)] > 0.0 && w[(i, j)] > 0.0 {
                pair_arcs.push((i, j, net.arcs.len()));
                net.add(1 + i, 1 + n + j, upper[(i, j)], -w[(i, j)]);
            }
        }
    }
    let nodes = 2 * n + 2;
    let mut total = 0.0;
    loop {
        // Bellman-Ford (queue based); residual graph has no negative cycles
        let mut dist = vec![f64::INFINITY; nodes];
        let mut pred = vec![usize::MAX; nodes];
        let mut inq = vec![false; nodes];
        let mut q = VecDeque::new();
        dist[s] = 0.0;
        q.push_back(s);
        inq[s] = true;
        while let Some(u) = q.pop_front() {
            inq[u] = false;
            for &e in &net.out[u] {
                let a = net.arcs[e];
                if a.cap > FLOW_EPS && dist[u] + a.cost < dist[a.to] - 1e-12 {
                    dist[a.to] = dist[u] + a.cost;
                    pred[a.to] = e;
                    if !inq[a.to] {
                        inq[a.to] = true;
                        q.push_back(a.to);
                    }
                }
            }
        }
        if !dist[t].is_finite() || dist[t] >= -1e-12 {
            break;
        }
        let mut push = f64::INFINITY;
        let mut v = t;
        while v != s {
            let e = pred[v];
            push = push.min(net.arcs[e].cap);
            v = net.arcs[e ^ 1].to;
        }
        let mut v = t;
        while v != s {
            let e = pred[v];
            net.arcs[e].cap -= push;
            net.arcs[e ^ 1].cap += push;
            v = net.arcs[e ^ 1].to;
        }
        total += -dist[t] * push;
    }
    // the bipartite flow and its transpose are both optimal; average them
    let mut y = Matrix::zeros(n, n);
    for (i, j, e) in pair_arcs {
        let f = net.arcs[e ^ 1].cap;
        y[(i, j)] += 0.5 * f;
        y[(j, i)] += 0.5 * f;
    }
    Ok((total, y))
}

/// Same problem solved by [`simplex_max`] on the upper-triangular variables.
pub fn capacitated_weight_max_simplex(w: &Matrix, upper: &Matrix, row_cap: &[f64]) -> Result<f64> {
    let n = w.rows();
    let vars: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let nv = vars.len();
    let c: Vec<f64> = vars.iter().map(|&(i, j)| 2.0 * w[(i, j)]).collect();
    let mut a = Matrix::zeros(nv + n, nv);
    let mut b = Vec::with_capacity(nv + n);
    for (v, &(i, j)) in vars.iter().enumerate() {
        a[(v, v)] = 1.0;
        b.push(upper[(i, j)]);
    }
    for r in 0..n {
        for (v, &(i, j)) in vars.iter().enumerate() {
            if i == r || j == r {
                a[(nv + r, v)] = 1.0;
            }
        }
        b.push(row_cap[r]);
    }
    // the diagonal only contributes when allowed, and then independently
    let diag: f64 = (0..n).map(|i| w[(i, i)] * upper[(i, i)].min(row_cap[i])).sum();
    if diag != 0.0 {
        return invalid("simplex variant assumes a hollow upper bound");
    }
    Ok(simplex_max(&c, &a, &b)?.0)
}

/// Maximum flow (Dinic) on a bipartite "rows → columns" network with unit
/// arcs for each allowed pair; returns the value of
/// `max Σ_{i<j} c_ij  s.t. 0 ≤ c ≤ A, Σ_j c_ij ≤ cap`, i.e. half the flow.
pub fn bounded_degree_edge_mass(adj: &[Vec<u32>], cap: f64) -> f64 {
    let n = adj.len();
    let s = 0;
    let t = 2 * n + 1;
    let mut net = Network::new(2 * n + 2);
    for i in 0..n {
        if adj[i].is_empty() {
            continue;
        }
        net.add(s, 1 + i, cap, 0.0);
        net.add(1 + n + i, t, cap, 0.0);
        for &j in &adj[i] {
            net.add(1 + i, 1 + n + j as usize, 1.0, 0.0);
        }
    }
    let nodes = 2 * n + 2;
    let mut flow = 0.0;
    loop {
        let mut level = vec![usize::MAX; nodes];
        level[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &e in &net.out[u] {
                let a = net.arcs[e];
                if a.cap > FLOW_EPS && level[a.to] == usize::MAX {
                    level[a.to] = level[u] + 1;
                    q.push_back(a.to);
                }
            }
        }
        if level[t] == usize::MAX {
            break;
        }
        let mut iter = vec![0usize; nodes];
        loop {
            let f = dinic_dfs(&mut net, &level, &mut iter, s, t, f64::INFINITY);
            if f <= FLOW_EPS {
                break;
            }
            flow += f;
        }
    }
    flow / 2.0
}

fn dinic_dfs(net: &mut Network, level: &[usize], iter: &mut [usize], u: usize, t: usize, limit: f64) -> f64 {
    if u == t {
        return limit;
    }
    while iter[u] < net.out[u].len() {
        let e = net.out[u][iter[u]];
        let a = net.arcs[e];
        if a.cap > FLOW_EPS && level[a.to] == level[u] + 1 {
            let got = dinic_dfs(net, level, iter, a.to, t, limit.min(a.cap));
            if got > FLOW_EPS {
                net.arcs[e].cap -= got;
                net.arcs[e ^ 1].cap += got;
                return got;
            }
        }
        iter[u] += 1;
    }
    0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, unit_f64};

    #[test]
    fn simplex_textbook() {
        // max 3x + 5y, x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18 → 36 at (2, 6)
        let a = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 2.0]]).unwrap();
        let (v, x) = simplex_max(&[3.0, 5.0], &a, &[4.0, 12.0, 18.0]).unwrap();
        assert!((v - 36.0).abs() < 1e-12);
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn flow_matches_simplex() {
        let mut r = stream(4, 0);
        for trial in 0..60 {
            let n = 2 + trial % 7;
            let mut w = Matrix::zeros(n, n);
            let mut u = Matrix::zeros(n, n);
            for i in 0..n {
                for j in i + 1..n {
                    let wv = (unit_f64(&mut r) * 4.0).round();
                    let uv = if unit_f64(&mut r) < 0.6 { unit_f64(&mut r) * 3.0 } else { 0.0 };
                    w[(i, j)] = wv;
                    w[(j, i)] = wv;
                    u[(i, j)] = uv;
                    u[(j, i)] = uv;
                }
            }
            let cap: Vec<f64> = (0..n).map(|_| unit_f64(&mut r) * 4.0).collect();
            let a = capacitated_weight_max(&w, &u, &cap).unwrap();
            let b = capacitated_weight_max_simplex(&w, &u, &cap).unwrap();
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
            let (v, y) = capacitated_weight_argmax(&w, &u, &cap).unwrap();
            assert!(y.is_symmetric(0.0));
            assert!((w.inner(&y) - v).abs() < 1e-9 * (1.0 + v.abs()));
            for i in 0..n {
                assert!(y.row(i).iter().sum::<f64>() <= cap[i] + 1e-9);
                for j in 0..n {
                    assert!(y[(i, j)] >= 0.0 && y[(i, j)] <= u[(i, j)] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn edge_mass_examples() {
        // triangle with cap 1: the half-integral optimum keeps 1.5 edges
        let tri = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
        assert!((bounded_degree_edge_mass(&tri, 1.0) - 1.5).abs() < 1e-12);
        assert!((bounded_degree_edge_mass(&tri, 5.0) - 3.0).abs() < 1e-12);
        // star with cap 2 keeps two edges
        let star = vec![vec![1, 2, 3, 4], vec![0], vec![0], vec![0], vec![0]];
        assert!((bounded_degree_edge_mass(&star, 2.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn edge_mass_matches_weighted_solver() {
        let mut r = stream(9, 0);
        for _ in 0..20 {
            let n = 9;
            let mut adj = vec![Vec::new(); n];
            let mut a = Matrix::zeros(n, n);
            for i in 0..n {
                for j in i + 1..n {
                    if unit_f64(&mut r) < 0.5 {
                        adj[i].push(j as u32);
                        adj[j].push(i as u32);
                        a[(i, j)] = 1.0;
                        a[(j, i)] = 1.0;
                    }
                }
            }
            let cap = 1.0 + unit_f64(&mut r) * 3.0;
            let x = bounded_degree_edge_mass(&adj, cap);
            let y = capacitated_weight_max(&a, &a, &vec![cap; n]).unwrap() / 2.0;
            assert!((x - y).abs() < 1e-9);
        }
    }
}
