mod common;

use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;

use mdgmix::align::{domain_center, AlignedFeatures};
use mdgmix::boundary::{candidate_count, select_boundaries};
use mdgmix::config::RunConfig;
use mdgmix::diag::{edit_sweep, lipschitz_upper, overlap_ratio, sigma_dep, sparse_spectral_norm};
use mdgmix::formats::{decode_matrix, encode_matrix};
use mdgmix::graph::{extract_ego, DomainGraph, EgoSubgraph};
use mdgmix::mix::{cosine_sim, intra_pair_counts, mix_subgraphs, sample_intra_pairs, MixedSubgraph, SourceView};
use mdgmix::nn::model::{GraphInput, ModelParams};
use mdgmix::nn::normalized_adjacency;
use mdgmix::seed;

use common::{canonical, row_key};

/// A graph on `n` nodes with random features in `[-1, 1)^dim`.
fn graph_strategy(max_n: usize, dim: usize) -> impl Strategy<Value = (Vec<(usize, usize)>, Array2<f64>)> {
    (2..max_n).prop_flat_map(move |n| {
        (
            prop::collection::vec((0..n, 0..n), 0..3 * n),
            prop::collection::vec(-1.0f64..1.0, n * dim),
        )
            .prop_map(move |(edges, x)| (edges, Array2::from_shape_vec((n, dim), x).unwrap()))
    })
}

fn ego_of(domain: usize, edges: &[(usize, usize)], x: &Array2<f64>, center: usize, hops: usize) -> (DomainGraph, EgoSubgraph) {
    let g = DomainGraph::from_edges(domain, edges, x.clone(), None).unwrap();
    let aligned = AlignedFeatures::new(domain, x.clone());
    let ego = extract_ego(&g, center % x.nrows(), hops, &aligned).unwrap();
    (g, ego)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inter_mix_invariants(
        (ea, xa) in graph_strategy(20, 3),
        (eb, xb) in graph_strategy(20, 3),
        ca in 0usize..100, cb in 0usize..100, hops in 1usize..3, lambda in 0.0f64..=1.0,
    ) {
        let (_, a) = ego_of(0, &ea, &xa, ca, hops);
        let (_, b) = ego_of(2, &eb, &xb, cb, hops);
        let m = mix_subgraphs(&a, &b, lambda, 3).unwrap();
        prop_assert_eq!(m.coarse_label, 1);
        prop_assert!((m.mix_label.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert_eq!(m.mix_label.clone(), vec![lambda, 0.0, 1.0 - lambda]);
        prop_assert_eq!(m.num_nodes, a.num_nodes() + b.num_nodes() - 1);
        prop_assert_eq!(m.edges.len(), a.edges_local.len() + b.edges_local.len());
        for w in m.edges.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
        for &(u, v) in &m.edges {
            prop_assert!(u < v && v < m.num_nodes);
        }
        let center = m.features.row(m.merged_center);
        for j in 0..3 {
            let want = lambda * a.features[[a.center_local, j]] + (1.0 - lambda) * b.features[[b.center_local, j]];
            prop_assert!((center[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn topology_ignores_lambda(
        (ea, xa) in graph_strategy(20, 2),
        (eb, xb) in graph_strategy(20, 2),
        ca in 0usize..100, cb in 0usize..100, same in any::<bool>(),
    ) {
        let (_, a) = ego_of(0, &ea, &xa, ca, 1);
        let (_, b) = if same { ego_of(0, &ea, &xa, cb, 1) } else { ego_of(1, &eb, &xb, cb, 1) };
        let mixes: Vec<MixedSubgraph> = [0.0, 0.3, 0.5, 1.0].iter().map(|&l| mix_subgraphs(&a, &b, l, 2).unwrap()).collect();
        for m in &mixes[1..] {
            prop_assert_eq!(m.num_nodes, mixes[0].num_nodes);
            prop_assert_eq!(&m.edges, &mixes[0].edges);
            prop_assert_eq!(m.merged_center, mixes[0].merged_center);
        }
    }

    #[test]
    fn half_mix_is_symmetric(
        (ea, xa) in graph_strategy(15, 3),
        (eb, xb) in graph_strategy(15, 3),
        ca in 0usize..100, cb in 0usize..100, same in any::<bool>(),
    ) {
        let (_, a) = ego_of(0, &ea, &xa, ca, 1);
        let (_, b) = if same { ego_of(0, &ea, &xa, cb, 1) } else { ego_of(1, &eb, &xb, cb, 1) };
        let ab = mix_subgraphs(&a, &b, 0.5, 2).unwrap();
        let ba = mix_subgraphs(&b, &a, 0.5, 2).unwrap();
        prop_assert_eq!(ab.num_nodes, ba.num_nodes);
        prop_assert_eq!(&ab.mix_label, &ba.mix_label);
        prop_assert_eq!(canonical(&ab), canonical(&ba));
        prop_assert_eq!(row_key(&ab, ab.merged_center), row_key(&ba, ba.merged_center));
    }

    #[test]
    fn intra_mix_identifies_shared_ids(
        (edges, x) in graph_strategy(25, 2),
        ca in 0usize..100, cb in 0usize..100, hops in 1usize..3, lambda in 0.0f64..=1.0,
    ) {
        let (_, a) = ego_of(1, &edges, &x, ca, hops);
        let (_, b) = ego_of(1, &edges, &x, cb, hops);
        let m = mix_subgraphs(&a, &b, lambda, 2).unwrap();
        let union: BTreeSet<usize> = a.node_set().union(&b.node_set()).copied().collect();
        let merged = usize::from(a.center_global != b.center_global);
        prop_assert_eq!(m.num_nodes, union.len() - merged);
        prop_assert_eq!(m.coarse_label, 0);
        prop_assert_eq!(m.mix_label.clone(), vec![0.0, lambda + (1.0 - lambda)]);
        prop_assert!((m.mix_label.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(
        x in prop::collection::vec(-10.0f64..10.0, 5),
        y in prop::collection::vec(-10.0f64..10.0, 5),
    ) {
        let (x, y) = (ndarray::Array1::from(x), ndarray::Array1::from(y));
        let s = cosine_sim(x.view(), y.view()).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        prop_assert_eq!(s, cosine_sim(y.view(), x.view()).unwrap());
    }

    #[test]
    fn candidate_count_is_integer_ceiling(p in 1usize..20, extra in 1usize..20, n in 1usize..500) {
        let q = p + extra;
        prop_assert_eq!(candidate_count(p as f64 / q as f64, n), (p * n).div_ceil(q).clamp(1, n));
    }

    #[test]
    fn boundary_sets_are_sorted_subsets(
        seed_value in any::<u64>(), k in 2usize..5, rho in 0.05f64..0.95,
    ) {
        let mut rng = seed::rng(seed_value, "prop");
        let aligned: Vec<AlignedFeatures> = (0..k)
            .map(|d| {
                let n = rand::Rng::random_range(&mut rng, 1..30);
                AlignedFeatures::new(d, Array2::from_shape_simple_fn((n, 3), || rand::Rng::random_range(&mut rng, -1.0..1.0)))
            })
            .collect();
        let centers: Vec<_> = aligned.iter().map(domain_center).collect();
        for b in select_boundaries(&aligned, &centers, rho).unwrap() {
            let n = aligned[b.domain_id].num_nodes();
            let c = candidate_count(rho, n);
            prop_assert!(!b.is_empty());
            prop_assert!(b.node_ids.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(b.node_ids.iter().all(|&i| i < n));
            prop_assert!(b.confidences.iter().all(|&c| (0.0..=1.0).contains(&c)));
            if b.used_fallback {
                prop_assert!(b.len() <= (k - 1) * c);
            } else {
                prop_assert!(b.len() <= c);
            }
            if k == 2 {
                prop_assert!(!b.used_fallback);
                prop_assert_eq!(b.len(), c);
            }
        }
    }

    #[test]
    fn intra_sampling_counts_and_distinctness(seed_value in any::<u64>(), n_pairs in 0usize..30, k in 1usize..6) {
        let pools: Vec<(usize, Vec<usize>)> = (0..k).map(|d| (d, (0..12).map(|i| 3 * i + d).collect())).collect();
        let pairs = sample_intra_pairs(&pools, n_pairs, &mut seed::rng(seed_value, "prop")).unwrap();
        prop_assert_eq!(pairs.len(), n_pairs);
        let counts = intra_pair_counts(n_pairs, k);
        prop_assert_eq!(counts.iter().sum::<usize>(), n_pairs);
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
        let mut seen = BTreeSet::new();
        for p in &pairs {
            prop_assert_eq!(p.domain_a, p.domain_b);
            prop_assert!(p.node_a != p.node_b);
            prop_assert!(pools[p.domain_a].1.contains(&p.node_a) && pools[p.domain_a].1.contains(&p.node_b));
            prop_assert!(seen.insert((p.domain_a, p.node_a.min(p.node_b), p.node_a.max(p.node_b))));
        }
        for (d, &c) in counts.iter().enumerate() {
            prop_assert_eq!(pairs.iter().filter(|p| p.domain_a == d).count(), c);
        }
    }

    #[test]
    fn matrix_format_round_trips_f32(rows in 0usize..8, cols in 0usize..8, vals in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 64)) {
        let m = Array2::from_shape_fn((rows, cols), |(i, j)| vals[i * 8 + j] as f64);
        let bytes = encode_matrix(&m);
        prop_assert_eq!(bytes.len(), 12 + 4 * rows * cols);
        prop_assert_eq!(decode_matrix(std::path::Path::new("mem"), &bytes).unwrap(), m);
    }

    #[test]
    fn config_json_round_trips(seed_value in any::<u64>(), rho in 0.01f64..0.99, gamma in 0.0f64..0.99, hidden in 1usize..512, shots in 1usize..10) {
        let cfg = RunConfig { seed: seed_value, rho, gamma, hidden, shots, ..RunConfig::default() };
        prop_assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn overlap_ratio_properties(a in prop::collection::btree_set(0u32..40, 1..20), b in prop::collection::btree_set(0u32..40, 1..20)) {
        let r = overlap_ratio(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(r, overlap_ratio(&b, &a).unwrap());
        let sub: BTreeSet<u32> = a.iter().take(1).copied().collect();
        prop_assert_eq!(overlap_ratio(&sub, &a).unwrap(), 1.0);
    }

    #[test]
    fn sigma_dep_grows_with_dependence(n in 1usize..100, d1 in 0.0f64..0.25, d2 in 0.0f64..0.25) {
        let (lo, hi) = (d1.min(d2), d1.max(d2));
        prop_assert!(sigma_dep(n, lo) <= sigma_dep(n, hi));
        prop_assert!(sigma_dep(n, lo) >= 0.5);
    }

    #[test]
    fn normalized_adjacency_has_unit_norm((edges, x) in graph_strategy(20, 1)) {
        let n = x.nrows();
        let a = normalized_adjacency(n, &edges.iter().copied().filter(|(u, v)| u != v).collect::<Vec<_>>());
        let dense = a.to_dense();
        prop_assert_eq!(dense.t(), dense.view());
        prop_assert!((sparse_spectral_norm(&a).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_node_edits_respect_the_lipschitz_bound(
        (edges, x) in graph_strategy(25, 4), seed_value in any::<u64>(), hops in 1usize..3,
    ) {
        let g = DomainGraph::from_edges(0, &edges, x.clone(), None).unwrap();
        prop_assume!(g.num_edges() > 0);
        let graphs = [g];
        let aligned = [AlignedFeatures::new(0, x)];
        let view = SourceView { graphs: &graphs, aligned: &aligned };
        let params = ModelParams::init(4, 6, 1, &mut seed::rng(seed_value, "enc"));
        let inputs: Vec<GraphInput> = (0..graphs[0].num_nodes())
            .map(|c| GraphInput::from(&view.ego(0, c, hops).unwrap()))
            .collect();
        let bound = lipschitz_upper(&params.encoder, &inputs).unwrap().bound;
        let (summary, _) = edit_sweep(&params.encoder, view, hops, bound, 10, &mut seed::rng(seed_value, "edits")).unwrap();
        prop_assert_eq!(summary.violations, 0);
    }
}
