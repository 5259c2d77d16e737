//! Measurable terms of the generalization bound and empirical probes of
//! the assumptions behind it.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::boundary::{center_distances, BoundarySet};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{DomainGraph, EgoSubgraph};
use crate::mix::{identify, mix_subgraphs, MixBatch, SourceView};
use crate::nn::model::{gcn_on_tape, graph_embedding, EncoderParams, EncoderVars, GraphInput, ModelParams};
use crate::nn::{AdamConfig, AdamState, SparseMatrix, Tape};
use crate::pipeline::Prepared;
use crate::seed::{self, Rng};

pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITER: usize = 10_000;

/// Largest eigenvalue of a symmetric positive semi-definite operator of
/// size `n`, by power iteration from a fixed pseudo-random start.
pub fn power_iteration(n: usize, apply: impl Fn(&Array1<f64>) -> Array1<f64>) -> Result<f64> {
    if n == 0 {
        return Ok(0.0);
    }
    let mut rng = seed::rng(0, "power-iteration");
    let mut v: Array1<f64> = Array1::from_shape_fn(n, |_| rng.random_range(0.5..1.5));
    v /= v.dot(&v).sqrt();
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITER {
        let w = apply(&v);
        let next = v.dot(&w);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = w / norm;
        if (next - lambda).abs() <= POWER_TOL * next.abs().max(f64::MIN_POSITIVE) {
            return Ok(next);
        }
        lambda = next;
    }
    Err(Error::NoConvergence(POWER_MAX_ITER))
}

/// Largest singular value of a dense matrix.
pub fn spectral_norm(m: &Array2<f64>) -> Result<f64> {
    let top = power_iteration(m.ncols(), |v| m.t().dot(&m.dot(v)))?;
    Ok(top.max(0.0).sqrt())
}

/// Largest singular value of a sparse matrix.
pub fn sparse_spectral_norm(m: &SparseMatrix) -> Result<f64> {
    let (_, cols) = m.shape();
    let top = power_iteration(cols, |v| {
        let col = v.clone().insert_axis(ndarray::Axis(1));
        m.t_mul_dense(&m.mul_dense(&col)).remove_axis(ndarray::Axis(1))
    })?;
    Ok(top.max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBound {
    pub sigma_w1: f64,
    pub sigma_w2: f64,
    /// Largest `||A~||_2` over the sampled subgraphs.
    pub adjacency_norm: f64,
    pub bound: f64,
}

/// `sigma(W1) sigma(W2) max ||A~||_2^2` over `subgraphs`.
pub fn lipschitz_upper(enc: &EncoderParams, subgraphs: &[GraphInput]) -> Result<LipschitzBound> {
    if subgraphs.is_empty() {
        return Err(Error::Validation("the Lipschitz bound needs at least one subgraph".into()));
    }
    let sigma_w1 = spectral_norm(&enc.w1)?;
    let sigma_w2 = spectral_norm(&enc.w2)?;
    let mut adjacency_norm: f64 = 0.0;
    for s in subgraphs {
        adjacency_norm = adjacency_norm.max(sparse_spectral_norm(&s.adj)?);
    }
    Ok(LipschitzBound {
        sigma_w1,
        sigma_w2,
        adjacency_norm,
        bound: sigma_w1 * sigma_w2 * adjacency_norm * adjacency_norm,
    })
}

/// `|A ∩ B| / min(|A|, |B|)`.
pub fn overlap_ratio<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation("overlap of an empty node set".into()));
    }
    let shared = a.intersection(b).count();
    Ok(shared as f64 / a.len().min(b.len()) as f64)
}

/// Largest pairwise overlap among `sets`.
pub fn max_overlap<T: Ord>(sets: &[BTreeSet<T>]) -> Result<f64> {
    let mut best: f64 = 0.0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            best = best.max(overlap_ratio(&sets[i], &sets[j])?);
        }
    }
    Ok(best)
}

/// `kappa * max_{i != j} ovlp(i, j)`. Node identities are
/// `(domain, node)`, so subgraphs from different graphs never overlap.
/// Fewer than two sets give 0.
pub fn delta_max_bound(sets: &[BTreeSet<(usize, usize)>], kappa: f64) -> Result<f64> {
    if !(0.0..=0.25).contains(&kappa) {
        return Err(Error::Validation(format!("kappa must lie in [0, 0.25], got {kappa}")));
    }
    Ok(kappa * max_overlap(sets)?)
}

/// `sqrt(1/4 + (n - 1) delta_max)`.
pub fn sigma_dep(n: usize, delta_max: f64) -> f64 {
    (0.25 + n.saturating_sub(1) as f64 * delta_max).sqrt()
}

/// `sigma_dep * sqrt(ln(2 / delta) / (2 n))`.
pub fn sampling_term(n: usize, delta_max: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Validation(format!("delta must lie in (0, 1), got {delta}")));
    }
    if n == 0 {
        return Err(Error::Validation("sampling term needs n >= 1".into()));
    }
    Ok(sigma_dep(n, delta_max) * ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryMass {
    /// `|B_k| / |V_k|` per source domain.
    pub per_domain: Vec<f64>,
    pub rho_min: f64,
}

pub fn boundary_mass(boundaries: &[BoundarySet], graphs: &[DomainGraph]) -> Result<BoundaryMass> {
    if boundaries.len() != graphs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} boundary sets for {} graphs",
            boundaries.len(),
            graphs.len()
        )));
    }
    let per_domain: Vec<f64> = boundaries
        .iter()
        .zip(graphs)
        .map(|(b, g)| b.len() as f64 / g.num_nodes() as f64)
        .collect();
    let rho_min = per_domain.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(BoundaryMass { per_domain, rho_min })
}

/// Node identities of every subgraph in a batch, keyed by `(domain, node)`.
/// A mixed subgraph owns the union of its two ego node sets.
pub fn batch_node_sets(batch: &MixBatch, view: SourceView<'_>, hops: usize) -> Result<Vec<BTreeSet<(usize, usize)>>> {
    batch
        .iter()
        .map(|m| {
            let p = &m.provenance;
            let a = view.ego(p.domain_a, p.node_a, hops)?;
            let b = view.ego(p.domain_b, p.node_b, hops)?;
            Ok(a.nodes_global
                .iter()
                .map(|&n| (p.domain_a, n))
                .chain(b.nodes_global.iter().map(|&n| (p.domain_b, n)))
                .collect())
        })
        .collect()
}

/// One pair in the stability sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCase {
    pub lambda: f64,
    pub lhs: f64,
    pub feature_term: f64,
    pub topology_edits: usize,
    pub rhs: f64,
}

/// Both sides of the mixing stability bound for one pair:
/// `||f(M(G1, G2)) - f(G1)|| <= (1 - lambda) L ||x_c2 - x_c1|| + L * edits`.
///
/// `edits` counts nodes and edges of the mix that do not come from `G1`,
/// plus any `G1` nodes or edges collapsed by the identification.
pub fn stability_case(enc: &EncoderParams, g1: &EgoSubgraph, g2: &EgoSubgraph, lambda: f64, l_f: f64) -> Result<StabilityCase> {
    let k = g1.source_domain.max(g2.source_domain) + 1;
    let mixed = mix_subgraphs(g1, g2, lambda, k)?;
    let ident = identify(g1, g2);
    let na = g1.num_nodes();
    let from_a: BTreeSet<usize> = ident.local_of[..na].iter().copied().collect();
    let edges_a: BTreeSet<(usize, usize)> = g1
        .edges_local
        .iter()
        .map(|&(u, v)| {
            let (x, y) = (ident.local_of[u], ident.local_of[v]);
            (x.min(y), x.max(y))
        })
        .filter(|(x, y)| x != y)
        .collect();
    let added_nodes = ident.num_nodes - from_a.len();
    let added_edges = ident.edges.iter().filter(|e| !edges_a.contains(e)).count();
    let collapsed = (na - from_a.len()) + (g1.edges_local.len() - edges_a.len());
    let topology_edits = added_nodes + added_edges + collapsed;

    let diff = &g2.features.row(g2.center_local) - &g1.features.row(g1.center_local);
    let feature_term = (1.0 - lambda) * l_f * diff.dot(&diff).sqrt();
    let f_mix = graph_embedding(&GraphInput::from(&mixed), enc)?;
    let f_1 = graph_embedding(&GraphInput::from(g1), enc)?;
    let lhs = f_mix.iter().zip(&f_1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(StabilityCase {
        lambda,
        lhs,
        feature_term,
        topology_edits,
        rhs: feature_term + l_f * topology_edits as f64,
    })
}

/// Violations are cases with `lhs > rhs + tol`.
pub const STABILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub checked: usize,
    pub violations: usize,
    /// Largest `lhs / rhs` seen (0 when every rhs is 0).
    pub max_ratio: f64,
}

fn summarize(pairs: impl Iterator<Item = (f64, f64)>) -> SweepSummary {
    let mut s = SweepSummary {
        checked: 0,
        violations: 0,
        max_ratio: 0.0,
    };
    for (lhs, rhs) in pairs {
        s.checked += 1;
        if lhs > rhs + STABILITY_TOL {
            s.violations += 1;
        }
        if rhs > 0.0 {
            s.max_ratio = s.max_ratio.max(lhs / rhs);
        }
    }
    s
}

fn random_ego(view: SourceView<'_>, domain: usize, hops: usize, rng: &mut Rng) -> Result<EgoSubgraph> {
    let n = view.graphs[domain].num_nodes();
    view.ego(domain, rng.random_range(0..n), hops)
}

/// Stability bound over `count` random pairs (half cross-domain, half
/// same-domain) with `lambda` uniform in `[0, 1]`.
pub fn stability_sweep(
    enc: &EncoderParams,
    view: SourceView<'_>,
    hops: usize,
    l_f: f64,
    count: usize,
    rng: &mut Rng,
) -> Result<(SweepSummary, Vec<StabilityCase>)> {
    let k = view.num_domains();
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let da = rng.random_range(0..k);
        let db = if i % 2 == 0 && k > 1 {
            (da + rng.random_range(1..k)) % k
        } else {
            da
        };
        let g1 = random_ego(view, da, hops, rng)?;
        let g2 = random_ego(view, db, hops, rng)?;
        let lambda = rng.random::<f64>();
        cases.push(stability_case(enc, &g1, &g2, lambda, l_f)?);
    }
    Ok((summarize(cases.iter().map(|c| (c.lhs, c.rhs))), cases))
}

/// One single-node edit: `g_plus` is an ego subgraph, `g_minus` the same
/// subgraph without one non-center node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditCase {
    pub edits: usize,
    pub change: f64,
    /// `change / edits`
    pub per_edit: f64,
}

/// Removes local node `drop` from an ego subgraph.
pub fn remove_node(sub: &EgoSubgraph, drop: usize) -> EgoSubgraph {
    assert_ne!(drop, sub.center_local, "cannot drop the center");
    let keep: Vec<usize> = (0..sub.num_nodes()).filter(|&i| i != drop).collect();
    let relabel = |i: usize| if i > drop { i - 1 } else { i };
    EgoSubgraph {
        source_domain: sub.source_domain,
        center_global: sub.center_global,
        center_local: relabel(sub.center_local),
        nodes_global: keep.iter().map(|&i| sub.nodes_global[i]).collect(),
        edges_local: sub
            .edges_local
            .iter()
            .filter(|&&(u, v)| u != drop && v != drop)
            .map(|&(u, v)| (relabel(u), relabel(v)))
            .collect(),
        features: sub.features.select(ndarray::Axis(0), &keep),
    }
}

/// `||f(G + v) - f(G)|| / (1 + deg(v))` over `count` random single-node
/// additions, compared against `l_f`.
pub fn edit_sweep(
    enc: &EncoderParams,
    view: SourceView<'_>,
    hops: usize,
    l_f: f64,
    count: usize,
    rng: &mut Rng,
) -> Result<(SweepSummary, Vec<EditCase>)> {
    let k = view.num_domains();
    let mut cases = Vec::with_capacity(count);
    let mut attempts = 0;
    while cases.len() < count {
        attempts += 1;
        if attempts > 100 * count.max(1) {
            return Err(Error::Validation("source graphs have no ego subgraph with two or more nodes".into()));
        }
        let plus = random_ego(view, rng.random_range(0..k), hops, rng)?;
        if plus.num_nodes() < 2 {
            continue;
        }
        let candidates: Vec<usize> = (0..plus.num_nodes()).filter(|&i| i != plus.center_local).collect();
        let drop = *candidates.choose(rng).expect("at least one non-center node");
        let minus = remove_node(&plus, drop);
        let edits = 1 + plus.edges_local.len() - minus.edges_local.len();
        let fp = graph_embedding(&GraphInput::from(&plus), enc)?;
        let fm = graph_embedding(&GraphInput::from(&minus), enc)?;
        let change = fp.iter().zip(&fm).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        cases.push(EditCase {
            edits,
            change,
            per_edit: change / edits as f64,
        });
    }
    Ok((summarize(cases.iter().map(|c| (c.per_edit, l_f))), cases))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub kind: String,
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
}

fn probe_forward(
    tape: &mut Tape,
    params: &ModelParams,
    inputs: &[&GraphInput],
    trainable: bool,
) -> (crate::nn::Var, [crate::nn::Var; 4]) {
    let (enc, w, b) = if trainable {
        (
            EncoderVars::record(tape, &params.encoder),
            tape.leaf(params.decomposer.w.clone()),
            tape.leaf(params.decomposer.b.clone()),
        )
    } else {
        (
            EncoderVars::frozen(tape, &params.encoder),
            tape.constant(params.decomposer.w.clone()),
            tape.constant(params.decomposer.b.clone()),
        )
    };
    let pooled: Vec<_> = inputs
        .iter()
        .map(|g| {
            let x = tape.constant(g.features.clone());
            let h = gcn_on_tape(tape, &g.adj, x, enc);
            tape.mean_rows(h)
        })
        .collect();
    let reps = tape.concat_rows(&pooled);
    let logits = tape.matmul(reps, w);
    let logits = tape.add_row(logits, b);
    (tape.softmax_rows(logits), [enc.w1, enc.w2, w, b])
}

fn one_hot(labels: &[usize], k: usize) -> Array2<f64> {
    Array2::from_shape_fn((labels.len(), k), |(i, c)| if labels[i] == c { 1.0 } else { 0.0 })
}

/// Domain classifier probe: a fresh encoder plus linear head is trained on
/// ego subgraphs of the nodes nearest their own domain center, then scored
/// on held-out center nodes, uniformly random nodes and boundary nodes.
pub fn ambiguity_probe(prep: &Prepared, cfg: &RunConfig) -> Result<Vec<ProbeRow>> {
    let k = prep.sources.len();
    let mut rng = seed::rng(cfg.seed, "probe");
    let view = SourceView {
        graphs: &prep.sources,
        aligned: &prep.aligned,
    };
    let ego_input = |d: usize, n: usize| -> Result<GraphInput> { Ok(GraphInput::from(&view.ego(d, n, cfg.hops)?)) };

    let mut train = Vec::new();
    let mut held = Vec::new();
    let mut random = Vec::new();
    let mut boundary = Vec::new();
    for d in 0..k {
        let dist = center_distances(&prep.aligned[d], &prep.centers)?;
        let n = prep.sources[d].num_nodes();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dist.matrix[[a, d]].total_cmp(&dist.matrix[[b, d]]).then(a.cmp(&b)));
        let pool_size = ((cfg.probe_center_fraction * n as f64).ceil() as usize).clamp(2.min(n), n);
        let mut pool = order[..pool_size].to_vec();
        pool.shuffle(&mut rng);
        let split = pool.len().div_ceil(2);
        let eval_count = pool.len() - split;
        train.extend(pool[..split].iter().map(|&v| (d, v)));
        held.extend(pool[split..].iter().map(|&v| (d, v)));
        let all: Vec<usize> = (0..n).collect();
        random.extend(all.choose_multiple(&mut rng, eval_count.max(1)).map(|&v| (d, v)));
        let b = &prep.boundaries[d].node_ids;
        boundary.extend(b.choose_multiple(&mut rng, eval_count.max(1).min(b.len())).map(|&v| (d, v)));
    }

    let build = |items: &[(usize, usize)]| -> Result<(Vec<GraphInput>, Vec<usize>)> {
        let inputs = items.iter().map(|&(d, v)| ego_input(d, v)).collect::<Result<Vec<_>>>()?;
        Ok((inputs, items.iter().map(|&(d, _)| d).collect()))
    };
    let (train_x, train_y) = build(&train)?;
    let train_refs: Vec<&GraphInput> = train_x.iter().collect();
    let targets = one_hot(&train_y, k);

    let mut params = ModelParams::init(cfg.pca_dim, cfg.hidden, k, &mut seed::rng(cfg.seed, "probe-init"));
    let names = ["probe.w1", "probe.w2", "probe.head.w", "probe.head.b"];
    {
        let mut adam = AdamState::new(
            AdamConfig::new(cfg.probe_lr, cfg.weight_decay),
            [&params.encoder.w1, &params.encoder.w2, &params.decomposer.w, &params.decomposer.b],
        );
        for _ in 0..cfg.probe_epochs {
            let mut tape = Tape::new();
            let (probs, vars) = probe_forward(&mut tape, &params, &train_refs, true);
            let loss = tape.cross_entropy(probs, targets.clone());
            let grads = tape.backward(loss);
            let g: Vec<Array2<f64>> = vars.iter().map(|&v| grads.get(v)).collect();
            adam.step(
                &names,
                &mut [
                    &mut params.encoder.w1,
                    &mut params.encoder.w2,
                    &mut params.decomposer.w,
                    &mut params.decomposer.b,
                ],
                &g,
            )?;
        }
    }

    let score = |kind: &str, items: &[(usize, usize)]| -> Result<ProbeRow> {
        let (x, y) = build(items)?;
        let refs: Vec<&GraphInput> = x.iter().collect();
        let mut tape = Tape::new();
        let (probs, _) = probe_forward(&mut tape, &params, &refs, false);
        let loss = tape.cross_entropy(probs, one_hot(&y, k));
        let p = tape.value(probs);
        let correct = p
            .rows()
            .into_iter()
            .zip(&y)
            .filter(|(row, &label)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (c, &v)| if v > b.1 { (c, v) } else { b })
                    .0;
                best == label
            })
            .count();
        Ok(ProbeRow {
            kind: kind.to_string(),
            accuracy: correct as f64 / y.len().max(1) as f64,
            loss: tape.scalar(loss),
            count: y.len(),
        })
    };
    Ok(vec![
        score("center", &held)?,
        score("random", &random)?,
        score("boundary", &boundary)?,
    ])
}

/// Everything the `diagnose` command reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub lipschitz: LipschitzBound,
    pub lipschitz_bound: f64,
    /// Subgraphs in one pre-training batch.
    pub n: usize,
    pub max_overlap: f64,
    pub kappa: f64,
    pub delta_max_bound: f64,
    pub sigma_dep: f64,
    pub delta: f64,
    pub sampling_term: f64,
    pub boundary_mass: BoundaryMass,
    pub boundary_used_fallback: Vec<bool>,
    pub probe_accuracies: Vec<ProbeRow>,
    pub stability: SweepSummary,
    pub stability_violations: usize,
    pub edit_sensitivity: SweepSummary,
    /// Bound terms that have no computable definition.
    pub not_computed: Vec<String>,
}
