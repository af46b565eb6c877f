use dpgraphon::graph_models::{prune_high_degree, BlockMatrix, CommunityMembership, LabeledGraph};
use dpgraphon::harness::mean_stderr;
use dpgraphon::io::{read_edge_list, read_packed, write_edge_list, write_packed};
use dpgraphon::linalg::Matrix;
use dpgraphon::mechanisms::{exact_em_distribution, CoefficientMode, MechanismConfig};
use dpgraphon::metrics::{delta_ds, delta_ds_exact_k2, delta_hat2, delta_p, BirkhoffOptions};
use dpgraphon::scoring::{block_sums, equipartition_count, ideal_score, lipschitz_score, Equipartitions};
use proptest::prelude::*;

fn sym(k: usize, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(0.0..hi, k * k).prop_map(move |v| {
        Matrix::from_fn(k, k, |i, j| if i <= j { v[i * k + j] } else { v[j * k + i] })
    })
}

fn graph(n: usize) -> impl Strategy<Value = LabeledGraph> {
    prop::collection::vec(any::<bool>(), n * (n - 1) / 2).prop_map(move |bits| {
        let mut edges = Vec::new();
        let mut p = 0;
        for i in 0..n {
            for j in i + 1..n {
                if bits[p] {
                    edges.push((i, j));
                }
                p += 1;
            }
        }
        LabeledGraph::from_edges(n, edges).unwrap()
    })
}

fn permute(b: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_fn(b.rows(), b.rows(), |i, j| b[(perm[i], perm[j])])
}

fn opts() -> BirkhoffOptions {
    BirkhoffOptions { restarts: 16, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delta_ds_vanishes_on_relabelling(b in sym(3, 4.0), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let v = delta_ds(&permute(&b, &perm), &b, &opts()).unwrap().value;
        prop_assert!(v.abs() < 1e-9, "{}", v);
    }

    #[test]
    fn delta_ds_is_quadratic_in_scale(b in sym(2, 4.0), b0 in sym(2, 4.0), c in 0.1f64..5.0) {
        let base = delta_ds_exact_k2(&b, &b0).unwrap().0;
        let scaled = delta_ds_exact_k2(&b.scale(c), &b0.scale(c)).unwrap().0;
        prop_assert!((scaled - c * c * base).abs() <= 1e-9 * (1.0 + scaled));
    }

    #[test]
    fn distances_are_sandwiched(b in sym(2, 4.0), b0 in sym(2, 4.0)) {
        let hat = delta_hat2(&b, &b0).unwrap().powi(2);
        let ds = delta_ds_exact_k2(&b, &b0).unwrap().0;
        let p = delta_p(&b, &b0).unwrap();
        prop_assert!(hat <= ds + 1e-9 && ds <= p + 1e-9 && p <= 16.0 * ds + 1e-9);
    }

    #[test]
    fn doubly_stochastic_argmin(b in sym(3, 2.0), b0 in sym(3, 2.0)) {
        let s = delta_ds(&b, &b0, &opts()).unwrap().argmin.entries;
        for i in 0..3 {
            let row: f64 = (0..3).map(|j| s[(i, j)]).sum();
            let col: f64 = (0..3).map(|j| s[(j, i)]).sum();
            prop_assert!((row - 1.0).abs() < 1e-9 && (col - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn em_distribution_normalised_and_shift_invariant(scores in prop::collection::vec(-1e4f64..1e4, 1..40), shift in -1e6f64..1e6) {
        let cfg = MechanismConfig::new(1.0, 10.0, CoefficientMode::Strict, 0).unwrap();
        let p = exact_em_distribution(&scores, &cfg).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let q = exact_em_distribution(&shifted, &cfg).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn block_sums_preserve_total(y in sym(6, 3.0), labels in Just(vec![0usize, 0, 0, 1, 1, 1]).prop_shuffle()) {
        let z = CommunityMembership::new(labels, 2).unwrap();
        prop_assert!((block_sums(&z, &y).sum() - y.sum()).abs() < 1e-9);
    }

    #[test]
    fn extension_agrees_inside_the_cap(y in sym(6, 3.0), b in sym(2, 2.0)) {
        let b = BlockMatrix::new(b, 2.0).unwrap();
        let ideal = ideal_score(&b, &y).unwrap().value;
        let lip = lipschitz_score(&b, &y, 2.0).unwrap().value;
        prop_assert!((ideal - lip).abs() < 1e-9);
    }

    #[test]
    fn extension_never_exceeds_the_ideal(y in sym(6, 400.0), b in sym(2, 2.0)) {
        let b = BlockMatrix::new(b, 2.0).unwrap();
        let ideal = ideal_score(&b, &y).unwrap().value;
        let lip = lipschitz_score(&b, &y, 2.0).unwrap().value;
        prop_assert!(lip <= ideal + 1e-9 * (1.0 + ideal.abs()));
    }

    #[test]
    fn graph_files_round_trip(g in graph(9)) {
        let mut text = Vec::new();
        write_edge_list(&g, &mut text).unwrap();
        let mut bin = Vec::new();
        write_packed(&g, &mut bin).unwrap();
        let a = read_edge_list(&text[..]).unwrap();
        let b = read_packed(&bin[..]).unwrap();
        prop_assert_eq!(a.edges().collect::<Vec<_>>(), g.edges().collect::<Vec<_>>());
        prop_assert_eq!(b.edges().collect::<Vec<_>>(), g.edges().collect::<Vec<_>>());
    }

    #[test]
    fn rewiring_sets_exactly_the_new_neighbourhood(g in graph(8), v in 0usize..8, mask in 0u32..256) {
        let nb: Vec<usize> = (0..8).filter(|&u| u != v && mask >> u & 1 == 1).collect();
        let h = g.rewire_vertex(v, &nb).unwrap();
        h.check_invariants().unwrap();
        prop_assert_eq!(h.degree(v), nb.len());
        for a in 0..8 {
            for b in 0..8 {
                if a != v && b != v {
                    prop_assert_eq!(g.has_edge(a, b), h.has_edge(a, b));
                }
            }
        }
    }

    #[test]
    fn pruning_only_drops_high_degree_vertices(g in graph(10), thr in 0.0f64..9.0) {
        let (p, removed) = prune_high_degree(&g, thr);
        for v in 0..10 {
            prop_assert!(p.degree(v) <= g.degree(v));
            if removed.contains(&v) {
                prop_assert!(g.degree(v) as f64 > thr && p.degree(v) == 0);
            } else {
                prop_assert!(g.degree(v) as f64 <= thr);
            }
        }
    }

    #[test]
    fn stderr_matches_recomputation(v in prop::collection::vec(-10.0f64..10.0, 2..30)) {
        let (m, se) = mean_stderr(&v).unwrap();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assert!((m - mean).abs() < 1e-12 && (se - (var / n).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn equipartition_enumeration_matches_count() {
    for (n, k) in [(4, 2), (6, 2), (6, 3), (8, 4), (9, 3)] {
        let listed = Equipartitions::new(n, k).unwrap().count() as u128;
        assert_eq!(Some(listed), equipartition_count(n, k), "n={n} k={k}");
    }
}
