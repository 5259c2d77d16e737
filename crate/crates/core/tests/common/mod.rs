#![allow(dead_code)]

use mdgmix::adapt::{repeat_task, support_loss_and_grad, TargetView};
use mdgmix::config::{IntraPool, RunConfig, SynthSpec, TaskMode};
use mdgmix::mix::{build_batch, sample_intra_pairs, MixBatch, MixedSubgraph};
use mdgmix::nn::model::{loss_pretrain, ModelParams};
use mdgmix::pipeline::{prepare, Prepared};
use mdgmix::pretrain::intra_pools;
use mdgmix::seed;
use mdgmix::synth::{gen_synth, SynthData};
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use ndarray::Array2;

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-6;

pub fn small_spec() -> SynthSpec {
    SynthSpec {
        k: 3,
        nodes_per_domain: 40,
        feature_dim: 12,
        ..SynthSpec::default()
    }
}

pub fn small_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        pca_dim: 6,
        hidden: 8,
        n_pairs: 6,
        gamma: 0.2,
        epochs_pre: 5,
        steps_adapt: 10,
        repeats: 3,
        probe_epochs: 5,
        intra_pool: IntraPool::All,
        ..RunConfig::default()
    }
}

pub fn small_setup(seed: u64) -> (SynthData, RunConfig, Prepared) {
    let data = gen_synth(&small_spec(), seed).unwrap();
    let cfg = small_config(seed);
    let prep = prepare(&data.sources, &data.target, &cfg).unwrap();
    (data, cfg, prep)
}

pub fn first_batch(prep: &Prepared, cfg: &RunConfig) -> MixBatch {
    let mut rng = seed::rng_indexed(cfg.seed, "epoch", 0);
    let intra = sample_intra_pairs(&intra_pools(prep, cfg.intra_pool), cfg.n_pairs, &mut rng).unwrap();
    build_batch(&prep.inter_pairs, &intra, prep.source_view(), cfg.hops, cfg.lambda_mode, &mut rng).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub probes: usize,
    /// Probes dropped because the perturbation flipped a hard gate.
    pub skipped: usize,
    pub max_rel: f64,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            probes: self.probes + other.probes,
            skipped: self.skipped + other.skipped,
            max_rel: self.max_rel.max(other.max_rel),
        }
    }
}

/// Central differences on `per_tensor` random entries of every parameter
/// tensor of the pre-training objective. Encoder entries are compared with
/// `d L_dis - beta d L_fine`, the gradient the reversal layer produces.
pub fn check_pretrain_gradients(seed: u64, per_tensor: usize) -> GradCheck {
    let (_, cfg, prep) = small_setup(seed);
    let batch = first_batch(&prep, &cfg);
    let mut rng = seed::rng(seed, "fd-pretrain");
    let params = ModelParams::init(cfg.pca_dim, cfg.hidden, prep.sources.len(), &mut rng);
    let base = loss_pretrain(&params, &batch, cfg.grl_beta).unwrap();
    let mut out = GradCheck::default();
    for t in 0..6 {
        let (rows, cols) = base.grads[t].dim();
        for _ in 0..per_tensor {
            let (i, j) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[t][[i, j]] += delta;
                loss_pretrain(&p, &batch, cfg.grl_beta).unwrap()
            };
            let (plus, minus) = (eval(FD_STEP), eval(-FD_STEP));
            if plus.gate != base.gate || minus.gate != base.gate {
                out.skipped += 1;
                continue;
            }
            // The encoder sees the decomposer loss through the gradient
            // reversal layer.
            let fine_sign = if t < 2 { -cfg.grl_beta } else { 1.0 };
            let numeric = ((plus.loss_dis - minus.loss_dis) + fine_sign * (plus.loss_fine - minus.loss_fine)) / (2.0 * FD_STEP);
            out.max_rel = out.max_rel.max(rel_err(base.grads[t][[i, j]], numeric));
            out.probes += 1;
        }
    }
    out
}

/// Central differences of the support loss with respect to the prompt
/// weights, over several tasks in both task modes.
pub fn check_prompt_gradients(seed: u64, tasks: u64) -> GradCheck {
    let (_, cfg, prep) = small_setup(seed);
    let mut rng = seed::rng(seed, "fd-prompt");
    let params = ModelParams::init(cfg.pca_dim, cfg.hidden, prep.sources.len(), &mut rng);
    let labels = prep.target.labels.clone().unwrap();
    let mut out = GradCheck::default();
    for mode in [TaskMode::Node, TaskMode::Graph] {
        let view = TargetView::new(&prep.target, &prep.target_aligned, mode, cfg.hops).unwrap();
        for r in 0..tasks {
            let (_, task) = repeat_task(&labels, &cfg, mode, r).unwrap();
            let alpha: Vec<f64> = (0..prep.centers.len()).map(|_| rng.random_range(0.1..1.0)).collect();
            let (_, grad) = support_loss_and_grad(&view, &params.encoder, &prep.centers, &task, &alpha, cfg.tau).unwrap();
            for k in 0..alpha.len() {
                let eval = |delta: f64| {
                    let mut a = alpha.clone();
                    a[k] += delta;
                    support_loss_and_grad(&view, &params.encoder, &prep.centers, &task, &a, cfg.tau).unwrap().0
                };
                let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
                out.max_rel = out.max_rel.max(rel_err(grad[k], numeric));
                out.probes += 1;
            }
        }
    }
    out
}

/// Nodes within `hops` of `center`, by breadth-first search.
pub fn bfs_ball(n: usize, edges: &[(usize, usize)], center: usize, hops: usize) -> BTreeSet<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut dist = vec![usize::MAX; n];
    dist[center] = 0;
    let mut queue = VecDeque::from([center]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    (0..n).filter(|&v| dist[v] <= hops).collect()
}

pub struct OracleBoundary {
    pub nodes: Vec<usize>,
    pub fallback: bool,
}

/// Direct transcription of the selection rule with integer candidate
/// counts `ceil(p * n / q)` for `rho = p / q`.
pub fn boundary_oracle(features: &[Array2<f64>], p: usize, q: usize) -> Vec<OracleBoundary> {
    let k = features.len();
    let centers: Vec<Vec<f64>> = features
        .iter()
        .map(|x| {
            (0..x.ncols())
                .map(|j| (0..x.nrows()).map(|i| x[[i, j]]).sum::<f64>() / x.nrows() as f64)
                .collect()
        })
        .collect();
    let dist = |x: &[f64], c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut out = Vec::new();
    for (dk, x) in features.iter().enumerate() {
        let n = x.nrows();
        let count = (p * n).div_ceil(q).clamp(1, n);
        let mut cand_sets = Vec::new();
        for m in (0..k).filter(|&m| m != dk) {
            let margins: Vec<f64> = (0..n)
                .map(|i| {
                    let row = x.row(i).to_vec();
                    (dist(&row, &centers[dk]) - dist(&row, &centers[m])).abs()
                })
                .collect();
            let lo = margins.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let conf: Vec<f64> = margins
                .iter()
                .map(|&v| if hi > lo { 1.0 - (v - lo) / (hi - lo) } else { 1.0 })
                .collect();
            let chosen: BTreeSet<usize> = (0..n)
                .filter(|&i| {
                    let ahead = (0..n)
                        .filter(|&j| conf[j] > conf[i] || (conf[j] == conf[i] && j < i))
                        .count();
                    ahead < count
                })
                .collect();
            cand_sets.push(chosen);
        }
        let inter: BTreeSet<usize> = (0..n).filter(|i| cand_sets.iter().all(|s| s.contains(i))).collect();
        if inter.is_empty() {
            let union: BTreeSet<usize> = cand_sets.iter().flatten().copied().collect();
            out.push(OracleBoundary {
                nodes: union.into_iter().collect(),
                fallback: true,
            });
        } else {
            out.push(OracleBoundary {
                nodes: inter.into_iter().collect(),
                fallback: false,
            });
        }
    }
    out
}

pub fn row_key(m: &MixedSubgraph, i: usize) -> Vec<u64> {
    m.features.row(i).iter().map(|v| v.to_bits()).collect()
}

/// Edge set keyed by feature rows, so two node numberings compare equal
/// exactly when the labelled graphs are isomorphic (rows are distinct).
pub fn canonical(m: &MixedSubgraph) -> (BTreeMap<Vec<u64>, usize>, BTreeSet<(Vec<u64>, Vec<u64>)>) {
    let mut rows = BTreeMap::new();
    for i in 0..m.num_nodes {
        *rows.entry(row_key(m, i)).or_insert(0) += 1;
    }
    let edges = m
        .edges
        .iter()
        .map(|&(u, v)| {
            let (a, b) = (row_key(m, u), row_key(m, v));
            if a <= b {
                (a, b)
            } else {
                (b, a)
            }
        })
        .collect();
    (rows, edges)
}
