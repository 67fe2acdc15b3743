//! The normalized hypergraph operator against an explicit dense product of
//! its factors, and structural properties of the k-nearest construction.

use gcn_rwz::graph::{build_hypergraph, chebyshev_term, hypergraph_operator, Hypergraph, Neighbors, RoadNetwork};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Dense = Vec<Vec<f64>>;

fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

fn diag(v: &[f64]) -> Dense {
    (0..v.len())
        .map(|i| (0..v.len()).map(|j| if i == j { v[i] } else { 0.0 }).collect())
        .collect()
}

fn transpose(a: &Dense) -> Dense {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// `Dv^-1/2 H W De^-1 H^T Dv^-1/2` assembled from scratch.
fn oracle(n: usize, edges: &[Vec<usize>], weights: &[f64]) -> Dense {
    let e = edges.len();
    let mut h = vec![vec![0.0; e]; n];
    for (j, m) in edges.iter().enumerate() {
        for &v in m {
            h[v][j] = 1.0;
        }
    }
    let dv: Vec<f64> = (0..n).map(|v| (0..e).map(|j| h[v][j] * weights[j]).sum()).collect();
    let de: Vec<f64> = (0..e).map(|j| (0..n).map(|v| h[v][j]).sum()).collect();
    let dv_inv_sqrt = diag(&dv.iter().map(|d| 1.0 / d.sqrt()).collect::<Vec<_>>());
    let w = diag(weights);
    let de_inv = diag(&de.iter().map(|d| 1.0 / d).collect::<Vec<_>>());
    let left = matmul(&matmul(&matmul(&dv_inv_sqrt, &h), &w), &de_inv);
    matmul(&matmul(&left, &transpose(&h)), &dv_inv_sqrt)
}

fn random_hypergraph(rng: &mut ChaCha8Rng) -> (usize, Vec<Vec<usize>>, Vec<f64>) {
    let n = rng.gen_range(1..=10);
    let e = rng.gen_range(1..=12);
    let mut verts: Vec<usize> = (0..n).collect();
    let mut edges: Vec<Vec<usize>> = (0..e)
        .map(|_| {
            verts.shuffle(rng);
            let size = rng.gen_range(1..=n);
            verts[..size].to_vec()
        })
        .collect();
    // Every vertex needs at least one hyperedge.
    for v in 0..n {
        if !edges.iter().any(|m| m.contains(&v)) {
            edges.push(vec![v]);
        }
    }
    let weights = edges.iter().map(|_| rng.gen_range(0.2..3.0)).collect();
    (n, edges, weights)
}

#[test]
fn operator_matches_dense_factors_on_random_hypergraphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (n, edges, weights) = random_hypergraph(&mut rng);
        let hg = Hypergraph::from_edges(n, edges.clone(), weights.clone()).unwrap();
        let op = hypergraph_operator(&hg).unwrap();
        let want = oracle(n, &edges, &weights);
        for i in 0..n {
            for j in 0..n {
                assert!((op.at(&[i, j]) - want[i][j]).abs() <= 1e-12);
            }
        }
        // D_v^{1/2} 1 is an eigenvector with eigenvalue 1.
        let dv = hg.vertex_degrees();
        let x: Vec<f64> = dv.iter().map(|d| d.sqrt()).collect();
        for i in 0..n {
            let y: f64 = (0..n).map(|j| op.at(&[i, j]) * x[j]).sum();
            assert!((y - x[i]).abs() <= 1e-10);
        }
    }
}

fn random_network(rng: &mut ChaCha8Rng, n: usize) -> RoadNetwork {
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0))).collect();
    let d = pts
        .iter()
        .map(|a| pts.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).collect())
        .collect();
    RoadNetwork::new((0..n).map(|i| format!("s{i}")).collect(), d, 1.0).unwrap()
}

#[test]
fn k_nearest_edges_have_k_plus_one_members() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 2..9 {
        let net = random_network(&mut rng, n);
        for k in 1..n {
            let hg = build_hypergraph(&net, Neighbors::Count(k)).unwrap();
            assert_eq!(hg.edge_count(), n);
            assert!(hg.edges().iter().all(|e| e.len() == k + 1));
            for (i, e) in hg.edges().iter().enumerate() {
                assert!(e.contains(&i));
                // No excluded vertex is strictly closer than an included one.
                let worst = e.iter().map(|&j| net.distance(i, j)).fold(0.0, f64::max);
                assert!((0..n).filter(|j| !e.contains(j)).all(|j| net.distance(i, j) >= worst));
            }
        }
        assert!(build_hypergraph(&net, Neighbors::Count(n)).is_err());
        assert!(build_hypergraph(&net, Neighbors::Count(0)).is_err());
        let all = build_hypergraph(&net, Neighbors::All).unwrap();
        assert!(all.edges().iter().all(|e| e.len() == n));
    }
}

#[test]
fn relabelling_segments_conjugates_the_operator() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let n = rng.gen_range(3..9);
        let net = random_network(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let k = Neighbors::Count(rng.gen_range(1..n));
        let op = hypergraph_operator(&build_hypergraph(&net, k).unwrap()).unwrap();
        let permuted = net.permuted(&perm).unwrap();
        let op_p = hypergraph_operator(&build_hypergraph(&permuted, k).unwrap()).unwrap();
        // Continuous random distances have no ties, so the neighbour sets
        // are unambiguous.
        for i in 0..n {
            for j in 0..n {
                assert!((op_p.at(&[i, j]) - op.at(&[perm[i], perm[j]])).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn chebyshev_matches_trigonometric_form(k in 0usize..12, x in -1.0f64..=1.0) {
        let want = (k as f64 * x.acos()).cos();
        prop_assert!((chebyshev_term(k, x) - want).abs() < 1e-9);
    }

    #[test]
    fn operator_is_symmetric_with_spectrum_in_unit_interval(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, edges, weights) = random_hypergraph(&mut rng);
        let op = hypergraph_operator(&Hypergraph::from_edges(n, edges, weights).unwrap()).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((op.at(&[i, j]) - op.at(&[j, i])).abs() < 1e-12);
                prop_assert!(op.at(&[i, j]) >= 0.0);
            }
        }
        // Power iteration bound: |G x| <= |x| for a random x.
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gx: Vec<f64> = (0..n).map(|i| (0..n).map(|j| op.at(&[i, j]) * x[j]).sum()).collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!(norm(&gx) <= norm(&x) * (1.0 + 1e-12));
    }
}
