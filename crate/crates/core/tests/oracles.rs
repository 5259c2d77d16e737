//! Library routines checked against small, independent reference
//! implementations written from the definitions.

mod common;

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mdgmix::align::{domain_center, AlignedFeatures, PcaFit};
use mdgmix::boundary::select_boundaries;
use mdgmix::diag::{spectral_norm, sparse_spectral_norm};
use mdgmix::graph::{extract_ego, DomainGraph};
use mdgmix::mix::select_pairs;
use mdgmix::nn::sparse::normalized_adjacency;

use common::{bfs_ball, boundary_oracle};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

fn random_edges(r: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if r.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    edges
}

// ---------------------------------------------------------------- ego

#[test]
fn ego_matches_bfs_and_pair_filter() {
    let mut r = rng(11);
    for _ in 0..100 {
        let n = r.random_range(1..40);
        let p = r.random_range(0.0..0.3);
        let edges = random_edges(&mut r, n, p);
        let center = r.random_range(0..n);
        let hops = r.random_range(1..4);
        let g = DomainGraph::from_edges(0, &edges, Array2::zeros((n, 2)), None).unwrap();
        let aligned = AlignedFeatures::new(0, random_matrix(&mut r, n, 2));
        let ego = extract_ego(&g, center, hops, &aligned).unwrap();

        let want_nodes = bfs_ball(n, &edges, center, hops);
        let got_nodes: BTreeSet<usize> = ego.nodes_global.iter().copied().collect();
        assert_eq!(got_nodes, want_nodes);

        let want_edges: BTreeSet<(usize, usize)> = edges
            .iter()
            .copied()
            .filter(|(u, v)| want_nodes.contains(u) && want_nodes.contains(v))
            .collect();
        let got_edges: BTreeSet<(usize, usize)> = ego
            .edges_local
            .iter()
            .map(|&(a, b)| {
                let (u, v) = (ego.nodes_global[a], ego.nodes_global[b]);
                (u.min(v), u.max(v))
            })
            .collect();
        assert_eq!(got_edges.len(), ego.edges_local.len(), "duplicate local edges");
        assert_eq!(got_edges, want_edges);
        assert_eq!(ego.nodes_global[ego.center_local], center);
        for (i, &v) in ego.nodes_global.iter().enumerate() {
            assert_eq!(ego.features.row(i), aligned.matrix.row(v));
        }
    }
}

// ----------------------------------------------------------- boundary

#[test]
fn boundary_selection_matches_brute_force() {
    let rhos = [(1, 20), (1, 10), (1, 5), (3, 10), (1, 2), (2, 3)];
    let mut r = rng(23);
    let (mut fallbacks, mut intersections) = (0, 0);
    for instance in 0..20 {
        let k = 2 + instance % 3;
        let dim = r.random_range(2..6);
        let features: Vec<Array2<f64>> = (0..k)
            .map(|_| {
                let n = r.random_range(3..200 / k);
                let shift = r.random_range(-2.0..2.0);
                random_matrix(&mut r, n, dim).mapv(|v| v + shift)
            })
            .collect();
        let (p, q) = rhos[instance % rhos.len()];
        let aligned: Vec<AlignedFeatures> = features
            .iter()
            .enumerate()
            .map(|(i, x)| AlignedFeatures::new(i, x.clone()))
            .collect();
        let centers: Vec<_> = aligned.iter().map(domain_center).collect();
        let got = select_boundaries(&aligned, &centers, p as f64 / q as f64).unwrap();
        let want = boundary_oracle(&features, p, q);
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.node_ids, w.nodes, "instance {instance} domain {}", g.domain_id);
            assert_eq!(g.used_fallback, w.fallback, "instance {instance} domain {}", g.domain_id);
            if w.fallback {
                fallbacks += 1;
            } else {
                intersections += 1;
            }
        }
    }
    assert!(fallbacks > 0 && intersections > 0, "both branches exercised ({fallbacks}, {intersections})");
}

// -------------------------------------------------------------- pairs

#[test]
fn pair_selection_matches_exhaustive_enumeration() {
    let mut r = rng(5);
    for _ in 0..10 {
        let aligned: Vec<AlignedFeatures> = (0..3).map(|k| AlignedFeatures::new(k, random_matrix(&mut r, 10, 4))).collect();
        let centers: Vec<_> = aligned.iter().map(domain_center).collect();
        let boundaries = select_boundaries(&aligned, &centers, 0.5).unwrap();

        let mut all = Vec::new();
        for a in &boundaries {
            for b in &boundaries {
                if a.domain_id >= b.domain_id {
                    continue;
                }
                for &u in &a.node_ids {
                    for &v in &b.node_ids {
                        let x = aligned[a.domain_id].matrix.row(u);
                        let y = aligned[b.domain_id].matrix.row(v);
                        let sim = x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt());
                        if sim > 0.3 {
                            all.push((sim, a.domain_id, u, b.domain_id, v));
                        }
                    }
                }
            }
        }
        all.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2, x.3, x.4).cmp(&(y.1, y.2, y.3, y.4))));
        let sel = select_pairs(&boundaries, &aligned, 0.3, 10).unwrap();
        let expected_short = 10usize.checked_sub(all.len()).filter(|&s| s > 0);
        assert_eq!(sel.shortfall, expected_short);
        all.truncate(10);
        assert_eq!(sel.pairs.len(), all.len());
        for (p, w) in sel.pairs.iter().zip(&all) {
            assert_eq!((p.domain_a, p.node_a, p.domain_b, p.node_b), (w.1, w.2, w.3, w.4));
            assert!((p.similarity.unwrap() - w.0).abs() < 1e-12);
        }
    }
}

// ---------------------------------------------------------------- pca

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[i][i]).collect();
    let vectors = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (values, vectors)
}

#[test]
fn pca_matches_jacobi_reference() {
    let mut r = rng(7);
    for _ in 0..10 {
        let (n, p, d) = (r.random_range(8..30), r.random_range(2..7), 2);
        let x = random_matrix(&mut r, n, p);
        let fit = PcaFit::fit(&x, d).unwrap();

        let mean: Vec<f64> = (0..p).map(|j| x.column(j).sum() / n as f64).collect();
        let cov: Vec<Vec<f64>> = (0..p)
            .map(|a| {
                (0..p)
                    .map(|b| (0..n).map(|i| (x[[i, a]] - mean[a]) * (x[[i, b]] - mean[b])).sum::<f64>() / (n - 1) as f64)
                    .collect()
            })
            .collect();
        let (values, vectors) = jacobi_eigen(cov);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
        for slot in 0..d {
            let idx = order[slot];
            assert!((fit.eigenvalues[slot] - values[idx]).abs() < 1e-9 * values[idx].max(1.0));
            let dot: f64 = (0..p).map(|i| fit.components[[i, slot]] * vectors[idx][i]).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-7, "component {slot} off by {dot}");
        }
        let projected = fit.project(&x).unwrap();
        for slot in 0..d {
            let col_mean = projected.column(slot).sum() / n as f64;
            assert!(col_mean.abs() < 1e-10);
        }
    }
}

// ------------------------------------------------------ spectral norm

#[test]
fn spectral_norms_match_dense_svd() {
    let mut r = rng(3);
    for _ in 0..10 {
        let (rows, cols) = (r.random_range(2..12), r.random_range(2..12));
        let m = random_matrix(&mut r, rows, cols);
        let svd = DMatrix::from_fn(rows, cols, |i, j| m[[i, j]]).svd(false, false);
        let want = svd.singular_values.max();
        let got = spectral_norm(&m).unwrap();
        assert!((got - want).abs() < 1e-6 * want, "{got} vs {want}");
    }
    for _ in 0..10 {
        let n = r.random_range(2..25);
        let edges = random_edges(&mut r, n, 0.3);
        let adj = normalized_adjacency(n, &edges);
        let dense = adj.to_dense();
        let svd = DMatrix::from_fn(n, n, |i, j| dense[[i, j]]).svd(false, false);
        let want = svd.singular_values.max();
        let got = sparse_spectral_norm(&adj).unwrap();
        assert!((got - want).abs() < 1e-6 * want, "{got} vs {want}");
    }
}
