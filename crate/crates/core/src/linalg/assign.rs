//! Assignment problems: Hungarian method and capacitated (balanced) assignment.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::matrix::Matrix;
use crate::error::{invalid, Result};

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
/// Returns `(col_of_row, total_cost)`. Potentials-based O(rows² · cols).
pub fn hungarian(cost: &Matrix) -> Result<(Vec<usize>, f64)> {
    let n = cost.rows();
    let m = cost.cols();
    if n > m {
        return invalid(format!("hungarian needs rows <= cols, got {n}x{m}"));
    }
    if cost.data().iter().any(|c| !c.is_finite()) {
        return invalid("hungarian: non-finite cost");
    }
    if n == 0 {
        return Ok((vec![], 0.0));
    }
    // 1-based arrays, column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok((assignment, total))
}

/// Assign each of `n` items to one of `k` groups (cost matrix `n × k`) so that
/// group `g` receives exactly `capacity[g]` items, at minimum total cost.
///
/// Equivalent to the Hungarian method on the cost matrix with each column
/// replicated `capacity[g]` times, but solved as a transportation problem by
/// successive shortest paths over the `k` group nodes: O(n k² log n) instead
/// of O(n³).
pub fn capacitated_assignment(cost: &Matrix, capacity: &[usize]) -> Result<Vec<usize>> {
    let n = cost.rows();
    let k = cost.cols();
    if capacity.len() != k {
        return invalid("capacity length must equal number of groups");
    }
    if capacity.iter().sum::<usize>() != n {
        return invalid("capacities must sum to the number of items");
    }
    if cost.data().iter().any(|c| !c.is_finite()) {
        return invalid("capacitated assignment: non-finite cost");
    }
    let mut group = vec![usize::MAX; n];
    let mut load = vec![0usize; k];
    // heaps[a * k + b]: members of a keyed by the cost of moving them to b
    let mut heaps: Vec<BinaryHeap<Reverse<(Key, usize)>>> = (0..k * k).map(|_| BinaryHeap::new()).collect();

    let push_member = |heaps: &mut Vec<BinaryHeap<Reverse<(Key, usize)>>>, item: usize, a: usize| {
        for b in 0..k {
            if b != a {
                let key = cost[(item, b)] - cost[(item, a)];
                heaps[a * k + b].push(Reverse((Key(key), item)));
            }
        }
    };

    for item in 0..n {
        // clean stale heap tops and read edge weights between groups
        let mut edge = vec![f64::INFINITY; k * k];
        let mut edge_item = vec![usize::MAX; k * k];
        for a in 0..k {
            for b in 0..k {
                if a == b {
                    continue;
                }
                let h = &mut heaps[a * k + b];
                while let Some(Reverse((_, it))) = h.peek() {
                    if group[*it] == a {
                        break;
                    }
                    h.pop();
                }
                if let Some(Reverse((Key(c), it))) = h.peek() {
                    edge[a * k + b] = *c;
                    edge_item[a * k + b] = *it;
                }
            }
        }
        // Bellman-Ford from the new item (no negative cycles: the current
        // assignment is optimal for the items placed so far)
        let mut dist: Vec<f64> = (0..k).map(|g| cost[(item, g)]).collect();
        let mut pred = vec![usize::MAX; k];
        for _ in 0..k {
            let mut changed = false;
            for a in 0..k {
                if !dist[a].is_finite() {
                    continue;
                }
                for b in 0..k {
                    let w = edge[a * k + b];
                    if a != b && w.is_finite() && dist[a] + w < dist[b] - 1e-15 * (1.0 + dist[b].abs()) {
                        dist[b] = dist[a] + w;
                        pred[b] = a;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let target = (0..k)
            .filter(|&g| load[g] < capacity[g])
            .min_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap_or(std::cmp::Ordering::Equal))
            .expect("capacity available");
        // walk the path backwards: each hop moves one member from pred to cur
        let mut path = vec![target];
        let mut cur = target;
        while pred[cur] != usize::MAX {
            cur = pred[cur];
            path.push(cur);
            if path.len() > k + 1 {
                break;
            }
        }
        path.reverse();
        for w in path.windows(2) {
            let (a, b) = (w[0], w[1]);
            let moved = edge_item[a * k + b];
            group[moved] = b;
            push_member(&mut heaps, moved, b);
        }
        group[item] = path[0];
        push_member(&mut heaps, item, path[0]);
        load[target] += 1;
    }
    Ok(group)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Key(f64);
impl Eq for Key {}
impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::perm::Permutations;
    use crate::rng::{stream, unit_f64};

    #[test]
    fn hungarian_matches_brute_force() {
        let mut r = stream(3, 0);
        for n in 1..=6 {
            for _ in 0..20 {
                let c = Matrix::from_fn(n, n, |_, _| (unit_f64(&mut r) * 10.0).round());
                let (_, best) = hungarian(&c).unwrap();
                let brute = Permutations::new(n)
                    .map(|p| (0..n).map(|i| c[(i, p[i])]).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                assert!((best - brute).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn hungarian_rectangular() {
        let c = Matrix::from_rows(vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]]).unwrap();
        let (a, cost) = hungarian(&c).unwrap();
        assert_eq!(cost, 3.0);
        assert_eq!(a, vec![1, 0]);
    }

    #[test]
    fn capacitated_matches_replicated_hungarian() {
        let mut r = stream(11, 0);
        for (n, k) in [(4, 2), (6, 3), (9, 3), (12, 4), (10, 2)] {
            for _ in 0..30 {
                let c = Matrix::from_fn(n, k, |_, _| unit_f64(&mut r) * 5.0 - 1.0);
                let cap = vec![n / k; k];
                let g = capacitated_assignment(&c, &cap).unwrap();
                let mut load = vec![0; k];
                g.iter().for_each(|&x| load[x] += 1);
                assert_eq!(load, cap);
                let ours: f64 = g.iter().enumerate().map(|(i, &x)| c[(i, x)]).sum();
                let rep = Matrix::from_fn(n, n, |i, j| c[(i, j / (n / k))]);
                let (_, best) = hungarian(&rep).unwrap();
                assert!((ours - best).abs() < 1e-9, "{ours} vs {best}");
            }
        }
    }
}
