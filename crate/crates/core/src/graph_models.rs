//! Balanced stochastic block models, block graphons, and operations on the
//! graphs they generate.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{Matrix, SymOperator};
use crate::rng::{self, streams};

/// Symmetric `k × k` connectivity matrix with entries in `[0, bound]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BlockMatrixRepr", into = "BlockMatrixRepr")]
pub struct BlockMatrix {
    entries: Matrix,
    bound: f64,
}

#[derive(Serialize, Deserialize)]
struct BlockMatrixRepr {
    entries: Matrix,
    bound: f64,
}

impl TryFrom<BlockMatrixRepr> for BlockMatrix {
    type Error = Error;
    fn try_from(r: BlockMatrixRepr) -> Result<Self> {
        BlockMatrix::new(r.entries, r.bound)
    }
}

impl From<BlockMatrix> for BlockMatrixRepr {
    fn from(b: BlockMatrix) -> Self {
        BlockMatrixRepr { entries: b.entries, bound: b.bound }
    }
}

impl BlockMatrix {
    pub fn new(entries: Matrix, bound: f64) -> Result<Self> {
        if !entries.is_square() || entries.rows() == 0 {
            return invalid("block matrix must be square and non-empty");
        }
        if !(bound > 0.0) || !bound.is_finite() {
            return invalid("entry bound must be a positive real");
        }
        if !entries.is_symmetric(1e-12 * bound.max(1.0)) {
            return invalid("block matrix must be symmetric");
        }
        let slack = 1e-12 * bound;
        if entries.data().iter().any(|&v| !(v >= -slack && v <= bound + slack)) {
            return invalid(format!("block matrix entries must lie in [0, {bound}]"));
        }
        Ok(BlockMatrix { entries, bound })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, bound: f64) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?, bound)
    }

    pub fn k(&self) -> usize {
        self.entries.rows()
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.entries[(a, b)]
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn max_entry(&self) -> f64 {
        self.entries.max()
    }

    pub fn mean_entry(&self) -> f64 {
        let k = self.k() as f64;
        self.entries.sum() / (k * k)
    }

    pub fn is_normalized(&self) -> bool {
        (self.mean_entry() - 1.0).abs() <= 1e-12
    }
}

/// A `k`-equipartition of `n` vertices given by block labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunityMembership {
    k: usize,
    labels: Vec<usize>,
}

impl CommunityMembership {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        let n = labels.len();
        if k == 0 || n == 0 || n % k != 0 {
            return invalid(format!("need k | n (n={n}, k={k})"));
        }
        let mut counts = vec![0usize; k];
        for &l in &labels {
            if l >= k {
                return invalid(format!("label {l} out of range for k={k}"));
            }
            counts[l] += 1;
        }
        if counts.iter().any(|&c| c != n / k) {
            return invalid("labels do not form an equipartition");
        }
        Ok(CommunityMembership { k, labels })
    }

    /// Uniformly random equipartition (Fisher–Yates on the label multiset).
    pub fn random(n: usize, k: usize, rng: &mut rng::Rng) -> Result<Self> {
        if k == 0 || n % k != 0 {
            return invalid(format!("need k | n (n={n}, k={k})"));
        }
        let mut labels: Vec<usize> = (0..n).map(|i| i / (n / k)).collect();
        rng::shuffle(&mut labels, rng);
        Ok(CommunityMembership { k, labels })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn block_size(&self) -> usize {
        self.n() / self.k
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// The `n × k` 0/1 incidence matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.n(), self.k, |i, a| if self.labels[i] == a { 1.0 } else { 0.0 })
    }

    pub fn members(&self, a: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.labels[i] == a).collect()
    }
}

/// Latent data attached to a planted graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Latent {
    Communities(CommunityMembership),
    Positions(Vec<f64>),
}

/// Edge probabilities with block structure: `Q₀(i,j) = scale · block(g_i, g_j)`
/// off the diagonal, zero on it. Stored implicitly so large `n` stays cheap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeProbs {
    pub groups: Vec<usize>,
    pub block: Matrix,
    pub scale: f64,
}

impl EdgeProbs {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            self.scale * self.block[(self.groups[i], self.groups[j])]
        }
    }

    pub fn n(&self) -> usize {
        self.groups.len()
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.n();
        Matrix::from_fn(n, n, |i, j| self.get(i, j))
    }

    /// `Q₀ x`, in O(n k).
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let k = self.block.rows();
        let mut sums = vec![0.0; k];
        for (i, &g) in self.groups.iter().enumerate() {
            sums[g] += x[i];
        }
        for (i, &g) in self.groups.iter().enumerate() {
            let mut acc = 0.0;
            for b in 0..k {
                acc += self.block[(g, b)] * sums[b];
            }
            y[i] = self.scale * (acc - self.block[(g, g)] * x[i]);
        }
    }
}

/// Simple undirected graph on `0..n` with optional planted data.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledGraph {
    n: usize,
    adj: Vec<Vec<u32>>,
    pub latent: Option<Latent>,
    pub edge_probs: Option<EdgeProbs>,
}

impl LabeledGraph {
    pub fn empty(n: usize) -> Self {
        LabeledGraph { n, adj: vec![Vec::new(); n], latent: None, edge_probs: None }
    }

    /// Builds from an edge list; duplicates are merged, self-loops rejected.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut adj = vec![Vec::new(); n];
        for (u, v) in edges {
            if u >= n || v >= n {
                return invalid(format!("edge ({u},{v}) out of range for n={n}"));
            }
            if u == v {
                return invalid(format!("self-loop at {u}"));
            }
            adj[u].push(v as u32);
            adj[v].push(u as u32);
        }
        for nb in adj.iter_mut() {
            nb.sort_unstable();
            nb.dedup();
        }
        Ok(LabeledGraph { n, adj, latent: None, edge_probs: None })
    }

    /// Builds from a 0/1 symmetric hollow matrix.
    pub fn from_adjacency(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        if !a.is_square() {
            return invalid("adjacency must be square");
        }
        let mut edges = Vec::new();
        for i in 0..n {
            if a[(i, i)] != 0.0 {
                return invalid("adjacency must have zero diagonal");
            }
            for j in i + 1..n {
                let (x, y) = (a[(i, j)], a[(j, i)]);
                if x != y || (x != 0.0 && x != 1.0) {
                    return invalid("adjacency must be symmetric and binary");
                }
                if x == 1.0 {
                    edges.push((i, j));
                }
            }
        }
        Self::from_edges(n, edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Sorted neighbour lists, one per vertex.
    pub fn adjacency_lists(&self) -> &[Vec<u32>] {
        &self.adj
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.adj[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adj.iter().map(Vec::len).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i].binary_search(&(j as u32)).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edges `(u, v)` with `u < v`, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(u, nb)| nb.iter().filter(move |&&v| (v as usize) > u).map(move |&v| (u, v as usize)))
    }

    pub fn adjacency_matrix(&self) -> Matrix {
        let mut a = Matrix::zeros(self.n, self.n);
        for (u, v) in self.edges() {
            a[(u, v)] = 1.0;
            a[(v, u)] = 1.0;
        }
        a
    }

    pub fn communities(&self) -> Option<&CommunityMembership> {
        match &self.latent {
            Some(Latent::Communities(c)) => Some(c),
            _ => None,
        }
    }

    /// The graph with vertex `v`'s neighbourhood replaced (node-level adjacency).
    pub fn rewire_vertex(&self, v: usize, new_neighbors: &[usize]) -> Result<Self> {
        let mut edges: Vec<(usize, usize)> = self.edges().filter(|&(a, b)| a != v && b != v).collect();
        edges.extend(new_neighbors.iter().map(|&u| (v, u)));
        let mut g = Self::from_edges(self.n, edges)?;
        g.latent = self.latent.clone();
        g.edge_probs = self.edge_probs.clone();
        Ok(g)
    }

    /// Subgraph induced on `vertices` (relabelled `0..vertices.len()` in the given order).
    pub fn induced_subgraph(&self, vertices: &[usize]) -> Self {
        let mut pos = vec![usize::MAX; self.n];
        for (new, &old) in vertices.iter().enumerate() {
            pos[old] = new;
        }
        let mut adj = vec![Vec::new(); vertices.len()];
        for (new, &old) in vertices.iter().enumerate() {
            adj[new] = self.adj[old].iter().filter_map(|&u| {
                let p = pos[u as usize];
                (p != usize::MAX).then_some(p as u32)
            }).collect();
            adj[new].sort_unstable();
        }
        LabeledGraph { n: vertices.len(), adj, latent: None, edge_probs: None }
    }

    /// Checks symmetry, hollowness and sortedness of the adjacency lists.
    pub fn check_invariants(&self) -> Result<()> {
        for (u, nb) in self.adj.iter().enumerate() {
            if nb.windows(2).any(|w| w[0] >= w[1]) {
                return invalid(format!("row {u} not strictly sorted"));
            }
            for &v in nb {
                if v as usize == u {
                    return invalid("self-loop");
                }
                if !self.has_edge(v as usize, u) {
                    return invalid("asymmetric adjacency");
                }
            }
        }
        if let Some(p) = &self.edge_probs {
            if p.n() != self.n {
                return invalid("edge probability size mismatch");
            }
            if p.block.data().iter().any(|&b| !(0.0..=1.0).contains(&(b * p.scale))) {
                return invalid("edge probability outside [0,1]");
            }
        }
        Ok(())
    }
}

impl SymOperator for LabeledGraph {
    fn dim(&self) -> usize {
        self.n
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, nb) in self.adj.iter().enumerate() {
            y[i] = nb.iter().map(|&j| x[j as usize]).sum();
        }
    }
}

/// `D (A - Q₀) D` where `D` zeroes the masked-out vertices.
pub struct CenteredAdjacency<'a> {
    pub graph: &'a LabeledGraph,
    pub probs: &'a EdgeProbs,
    pub keep: Option<Vec<bool>>,
}

impl SymOperator for CenteredAdjacency<'_> {
    fn dim(&self) -> usize {
        self.graph.n()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.graph.n();
        let masked: Vec<f64> = match &self.keep {
            Some(k) => (0..n).map(|i| if k[i] { x[i] } else { 0.0 }).collect(),
            None => x.to_vec(),
        };
        let mut q = vec![0.0; n];
        self.probs.apply(&masked, &mut q);
        self.graph.apply(&masked, y);
        for i in 0..n {
            y[i] -= q[i];
            if let Some(k) = &self.keep {
                if !k[i] {
                    y[i] = 0.0;
                }
            }
        }
    }
}

/// Step-function graphon `W[B]` on `k` equal intervals of `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGraphon {
    pub b: BlockMatrix,
}

impl BlockGraphon {
    pub fn new(b: BlockMatrix) -> Self {
        BlockGraphon { b }
    }

    pub fn k(&self) -> usize {
        self.b.k()
    }

    /// Index of the interval containing `x`.
    pub fn block_of(&self, x: f64) -> usize {
        ((x * self.k() as f64).floor() as usize).min(self.k() - 1)
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        self.b.get(self.block_of(x), self.block_of(y))
    }
}

/// Adjacency scaled by a positive divisor.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledMatrix {
    pub entries: Matrix,
    pub scale: f64,
}

impl ScaledMatrix {
    pub fn n(&self) -> usize {
        self.entries.rows()
    }
}

fn sample_edges(n: usize, seed: u64, prob: impl Fn(usize, usize) -> f64) -> Vec<Vec<u32>> {
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        let mut row = rng::edge_row(seed, i);
        for j in i + 1..n {
            let u = rng::unit_f64(&mut row);
            if u < prob(i, j) {
                adj[i].push(j as u32);
                adj[j].push(i as u32);
            }
        }
    }
    // rows are filled in increasing order of the partner index
    adj
}

/// Balanced SBM: uniform equipartition, then independent edges with
/// probability `(d/n) B0(a, b)`.
pub fn sample_sbm(b0: &BlockMatrix, d: f64, n: usize, seed: u64) -> Result<LabeledGraph> {
    let k = b0.k();
    if n == 0 || n % k != 0 {
        return invalid(format!("n={n} is not a multiple of k={k}"));
    }
    if !(d >= 2.0 && d <= n as f64) {
        return invalid(format!("average degree d={d} must lie in [2, n]"));
    }
    let p = d / n as f64;
    if p * b0.max_entry() > 1.0 + 1e-12 {
        return invalid("edge probability exceeds 1");
    }
    let mut lrng = rng::stream(seed, streams::LABELS);
    let z = CommunityMembership::random(n, k, &mut lrng)?;
    let probs = EdgeProbs { groups: z.labels().to_vec(), block: b0.entries().clone(), scale: p };
    let adj = sample_edges(n, seed, |i, j| probs.get(i, j));
    Ok(LabeledGraph { n, adj, latent: Some(Latent::Communities(z)), edge_probs: Some(probs) })
}

/// Graph from a block graphon: uniform latent positions, `Q₀(i,j) = ρ W(x_i, x_j)`.
pub fn sample_graphon_graph(w: &BlockGraphon, rho: f64, n: usize, seed: u64) -> Result<LabeledGraph> {
    if !(rho > 0.0) {
        return invalid("rho must be positive");
    }
    if rho * w.b.max_entry() > 1.0 + 1e-12 {
        return invalid("edge probability exceeds 1");
    }
    let mut prng = rng::stream(seed, streams::POSITIONS);
    let x: Vec<f64> = (0..n).map(|_| rng::unit_f64(&mut prng)).collect();
    let probs = EdgeProbs {
        groups: x.iter().map(|&xi| w.block_of(xi)).collect(),
        block: w.b.entries().clone(),
        scale: rho,
    };
    let adj = sample_edges(n, seed, |i, j| probs.get(i, j));
    Ok(LabeledGraph { n, adj, latent: Some(Latent::Positions(x)), edge_probs: Some(probs) })
}

/// Removes every edge touching a vertex whose original degree exceeds `threshold`.
pub fn prune_high_degree(g: &LabeledGraph, threshold: f64) -> (LabeledGraph, Vec<usize>) {
    let removed: Vec<usize> = (0..g.n()).filter(|&v| g.degree(v) as f64 > threshold).collect();
    (drop_vertices_edges(g, &removed), removed)
}

/// Repeats the single pass until no surviving vertex exceeds `threshold`.
pub fn prune_high_degree_iterated(g: &LabeledGraph, threshold: f64) -> (LabeledGraph, Vec<usize>) {
    let mut cur = g.clone();
    let mut all = Vec::new();
    loop {
        let (next, removed) = prune_high_degree(&cur, threshold);
        if removed.is_empty() {
            all.sort_unstable();
            return (next, all);
        }
        all.extend(removed);
        cur = next;
    }
}

fn drop_vertices_edges(g: &LabeledGraph, removed: &[usize]) -> LabeledGraph {
    let mut gone = vec![false; g.n()];
    for &v in removed {
        gone[v] = true;
    }
    let adj = g
        .adj
        .iter()
        .enumerate()
        .map(|(u, nb)| if gone[u] { Vec::new() } else { nb.iter().copied().filter(|&v| !gone[v as usize]).collect() })
        .collect();
    LabeledGraph { n: g.n, adj, latent: g.latent.clone(), edge_probs: g.edge_probs.clone() }
}

/// `2|E| / (n(n-1))`.
pub fn empirical_density(g: &LabeledGraph) -> f64 {
    let n = g.n() as f64;
    if g.n() < 2 {
        return 0.0;
    }
    2.0 * g.edge_count() as f64 / (n * (n - 1.0))
}

pub fn scale_adjacency(g: &LabeledGraph, divisor: f64) -> Result<ScaledMatrix> {
    if !(divisor > 0.0) || !divisor.is_finite() {
        return invalid("divisor must be a positive real");
    }
    let mut m = Matrix::zeros(g.n(), g.n());
    let v = 1.0 / divisor;
    for (a, b) in g.edges() {
        m[(a, b)] = v;
        m[(b, a)] = v;
    }
    Ok(ScaledMatrix { entries: m, scale: divisor })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_b0_gives_half_probability() {
        let b = BlockMatrix::from_rows(vec![vec![1.0, 1.0], vec![1.0, 1.0]], 2.0).unwrap();
        let g = sample_sbm(&b, 2.0, 4, 1).unwrap();
        let p = g.edge_probs.as_ref().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(p.get(i, j), if i == j { 0.0 } else { 0.5 });
            }
        }
    }

    #[test]
    fn diagonal_b0_has_no_cross_edges() {
        let b = BlockMatrix::from_rows(vec![vec![2.0, 0.0], vec![0.0, 2.0]], 2.0).unwrap();
        for seed in 0..50 {
            let g = sample_sbm(&b, 2.0, 4, seed).unwrap();
            let z = g.communities().unwrap();
            assert!(g.edges().all(|(u, v)| z.label(u) == z.label(v)));
            g.check_invariants().unwrap();
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let b = BlockMatrix::from_rows(vec![vec![4.0, 0.0], vec![0.0, 4.0]], 4.0).unwrap();
        assert!(sample_sbm(&b, 3.0, 5, 0).is_err());
        assert!(sample_sbm(&b, 4.0, 10, 0).is_err());
        assert!(BlockMatrix::from_rows(vec![vec![1.0, 2.0], vec![0.0, 1.0]], 4.0).is_err());
        assert!(BlockMatrix::from_rows(vec![vec![5.0]], 4.0).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let b = BlockMatrix::from_rows(vec![vec![1.5, 0.5], vec![0.5, 1.5]], 4.0).unwrap();
        let g1 = sample_sbm(&b, 5.0, 60, 9).unwrap();
        let g2 = sample_sbm(&b, 5.0, 60, 9).unwrap();
        assert_eq!(g1, g2);
        let g3 = sample_sbm(&b, 5.0, 60, 10).unwrap();
        assert_ne!(g1, g3);
    }

    #[test]
    fn graphon_constant_and_block() {
        let one = BlockGraphon::new(BlockMatrix::from_rows(vec![vec![1.0]], 1.0).unwrap());
        let g = sample_graphon_graph(&one, 0.3, 50, 2).unwrap();
        let p = g.edge_probs.as_ref().unwrap();
        assert!((p.get(0, 1) - 0.3).abs() < 1e-15);
        let two = BlockGraphon::new(BlockMatrix::from_rows(vec![vec![2.0, 0.0], vec![0.0, 2.0]], 2.0).unwrap());
        let g = sample_graphon_graph(&two, 0.5, 40, 3).unwrap();
        let x = match g.latent.as_ref().unwrap() {
            Latent::Positions(x) => x.clone(),
            _ => unreachable!(),
        };
        let p = g.edge_probs.as_ref().unwrap();
        for i in 0..40 {
            for j in 0..40 {
                if (x[i] < 0.5) != (x[j] < 0.5) {
                    assert_eq!(p.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn star_pruning() {
        let g = LabeledGraph::from_edges(10, (1..10).map(|v| (0, v))).unwrap();
        let (p, removed) = prune_high_degree(&g, 5.0);
        assert_eq!(removed, vec![0]);
        assert_eq!(p.edge_count(), 0);
        let (same, none) = prune_high_degree(&g, 9.0);
        assert!(none.is_empty());
        assert_eq!(same, g);
    }

    #[test]
    fn density_examples() {
        let k4 = LabeledGraph::from_edges(4, [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]).unwrap();
        assert_eq!(empirical_density(&k4), 1.0);
        assert_eq!(empirical_density(&LabeledGraph::empty(5)), 0.0);
        let one = LabeledGraph::from_edges(3, [(0, 1)]).unwrap();
        assert!((empirical_density(&one) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn scaling_examples() {
        let one = LabeledGraph::from_edges(3, [(0, 1)]).unwrap();
        let s = scale_adjacency(&one, 0.5).unwrap();
        assert_eq!(s.entries[(0, 1)], 2.0);
        assert_eq!(s.entries[(1, 0)], 2.0);
        assert_eq!(s.entries.sum(), 4.0);
        assert_eq!(scale_adjacency(&one, 1.0).unwrap().entries, one.adjacency_matrix());
        assert!(scale_adjacency(&one, 0.0).is_err());
        assert_eq!(scale_adjacency(&LabeledGraph::empty(3), 2.0).unwrap().entries.sum(), 0.0);
    }

    #[test]
    fn centered_operator_matches_dense() {
        let b = BlockMatrix::from_rows(vec![vec![1.5, 0.5], vec![0.5, 1.5]], 4.0).unwrap();
        let g = sample_sbm(&b, 6.0, 30, 4).unwrap();
        let probs = g.edge_probs.clone().unwrap();
        let keep: Vec<bool> = (0..30).map(|i| i % 7 != 0).collect();
        let op = CenteredAdjacency { graph: &g, probs: &probs, keep: Some(keep.clone()) };
        let dense = g.adjacency_matrix().sub(&probs.to_dense());
        let x: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let mut y = vec![0.0; 30];
        op.apply(&x, &mut y);
        for i in 0..30 {
            let expect: f64 = if keep[i] { (0..30).filter(|&j| keep[j]).map(|j| dense[(i, j)] * x[j]).sum() } else { 0.0 };
            assert!((y[i] - expect).abs() < 1e-12);
        }
    }
}
