//! End-to-end stages: prepare, pre-train, adapt and evaluate, diagnose.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapt::{mean_std, run_repeats, EvalRecord, TargetView};
use crate::align::{align_domains, domain_center, AlignedFeatures, DomainCenter};
use crate::boundary::{select_boundaries, BoundarySet};
use crate::config::{PairStrategy, RunConfig};
use crate::diag::{self, DiagnosticsReport};
use crate::error::{Error, Result};
use crate::graph::DomainGraph;
use crate::mix::{build_batch, random_pairs, sample_intra_pairs, select_pairs, NodePair, SourceView};
use crate::nn::model::{GraphInput, ModelParams};
use crate::pretrain::{intra_pools, pretrain, Pretrained};
use crate::seed::{self, Rng};
use crate::synth::SynthData;

/// Aligned sources and target with boundary sets and the fixed inter pairs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sources: Vec<DomainGraph>,
    pub target: DomainGraph,
    pub aligned: Vec<AlignedFeatures>,
    pub target_aligned: AlignedFeatures,
    pub centers: Vec<DomainCenter>,
    pub boundaries: Vec<BoundarySet>,
    pub inter_pairs: Vec<NodePair>,
    /// Missing inter pairs when fewer than `n_pairs` qualified.
    pub shortfall: Option<usize>,
}

impl Prepared {
    pub fn source_view(&self) -> SourceView<'_> {
        SourceView {
            graphs: &self.sources,
            aligned: &self.aligned,
        }
    }
}

pub fn prepare(sources: &[DomainGraph], target: &DomainGraph, cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    if sources.len() < 2 {
        return Err(Error::Validation(format!("need at least two source domains, got {}", sources.len())));
    }
    for (i, g) in sources.iter().enumerate() {
        if g.domain_id != i {
            return Err(Error::Validation(format!("source {i} carries domain id {}", g.domain_id)));
        }
    }
    let (aligned, target_aligned) = align_domains(sources, target, cfg.pca_dim, cfg.align_mode, cfg.standardize)?;
    let centers: Vec<DomainCenter> = aligned.iter().map(domain_center).collect();
    let boundaries = select_boundaries(&aligned, &centers, cfg.rho)?;
    let (inter_pairs, shortfall) = match cfg.pair_strategy {
        PairStrategy::Boundary => {
            let sel = select_pairs(&boundaries, &aligned, cfg.gamma, cfg.n_pairs)?;
            (sel.pairs, sel.shortfall)
        }
        PairStrategy::Random => (
            random_pairs(&aligned, cfg.n_pairs, &mut seed::rng(cfg.seed, "random-pairs"))?,
            None,
        ),
    };
    Ok(Prepared {
        sources: sources.to_vec(),
        target: target.clone(),
        aligned,
        target_aligned,
        centers,
        boundaries,
        inter_pairs,
        shortfall,
    })
}

/// Few-shot evaluation of a pre-trained model on the prepared target.
pub fn evaluate_target(prep: &Prepared, params: &ModelParams, cfg: &RunConfig) -> Result<Vec<EvalRecord>> {
    let view = TargetView::new(&prep.target, &prep.target_aligned, cfg.mode, cfg.hops)?;
    run_repeats(&view, &params.encoder, &prep.centers, cfg)
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub pretrained: Pretrained,
    pub records: Vec<EvalRecord>,
}

impl PipelineRun {
    pub fn mean_accuracy(&self) -> f64 {
        mean_std(&self.accuracies()).0
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.accuracy).collect()
    }
}

/// Prepare, pre-train, then adapt and evaluate `repeats` times.
pub fn run_pipeline(sources: &[DomainGraph], target: &DomainGraph, cfg: &RunConfig) -> Result<PipelineRun> {
    let prep = prepare(sources, target, cfg)?;
    let pretrained = pretrain(&prep, cfg)?;
    let records = evaluate_target(&prep, &pretrained.params, cfg)?;
    Ok(PipelineRun { pretrained, records })
}

/// One JSON object per line.
pub fn metrics_jsonl(records: &[EvalRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Removes `floor(fraction * |V|)` uniformly chosen nodes and their edges.
pub fn drop_nodes(graph: &DomainGraph, fraction: f64, rng: &mut Rng) -> Result<DomainGraph> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Validation(format!("drop fraction must lie in [0, 1], got {fraction}")));
    }
    let n = graph.num_nodes();
    let drop = (fraction * n as f64).floor() as usize;
    if drop >= n {
        return Err(Error::DomainEmptied {
            fraction,
            domain: graph.domain_id,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut keep = vec![true; n];
    for &i in &order[..drop] {
        keep[i] = false;
    }
    graph.retain_nodes(&keep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub fraction: f64,
    pub mean: f64,
    pub std: f64,
    /// Mean accuracy of each seed's run.
    pub per_seed: Vec<f64>,
}

/// Accuracy after dropping a share of every source graph's nodes, over
/// several seeds. The target domain is never touched.
pub fn redundancy_experiment(data: &SynthData, cfg: &RunConfig, fractions: &[f64], seeds: &[u64]) -> Result<Vec<CurveRow>> {
    fractions
        .iter()
        .map(|&fraction| {
            let per_seed = seeds
                .iter()
                .map(|&s| {
                    let run_cfg = RunConfig { seed: s, ..cfg.clone() };
                    let mut rng = seed::rng(s, "drop");
                    let sources = data
                        .sources
                        .iter()
                        .map(|g| drop_nodes(g, fraction, &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(run_pipeline(&sources, &data.target, &run_cfg)?.mean_accuracy())
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&per_seed);
            Ok(CurveRow {
                fraction,
                mean,
                std,
                per_seed,
            })
        })
        .collect()
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("fraction,mean,std\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.fraction, r.mean, r.std));
    }
    out
}

/// Sweep sizes used by [`diagnose`].
pub const SWEEP_PAIRS: usize = 100;

/// Computes the full diagnostics report for a trained model.
pub fn diagnose(prep: &Prepared, params: &ModelParams, cfg: &RunConfig) -> Result<DiagnosticsReport> {
    let view = prep.source_view();
    let mut rng = seed::rng_indexed(cfg.seed, "epoch", 0);
    let intra = sample_intra_pairs(&intra_pools(prep, cfg.intra_pool), cfg.n_pairs, &mut rng)?;
    let batch = build_batch(&prep.inter_pairs, &intra, view, cfg.hops, cfg.lambda_mode, &mut rng)?;
    let inputs: Vec<GraphInput> = batch.iter().map(GraphInput::from).collect();
    let lipschitz = diag::lipschitz_upper(&params.encoder, &inputs)?;
    let sets = diag::batch_node_sets(&batch, view, cfg.hops)?;
    let max_overlap = diag::max_overlap(&sets)?;
    let delta_max_bound = diag::delta_max_bound(&sets, cfg.kappa)?;
    let n = batch.len();
    let sigma_dep = diag::sigma_dep(n, delta_max_bound);
    let sampling_term = diag::sampling_term(n, delta_max_bound, cfg.delta)?;
    let boundary_mass = diag::boundary_mass(&prep.boundaries, &prep.sources)?;
    let mut sweep_rng = seed::rng(cfg.seed, "stability");
    let (stability, _) = diag::stability_sweep(&params.encoder, view, cfg.hops, lipschitz.bound, SWEEP_PAIRS, &mut sweep_rng)?;
    let mut edit_rng = seed::rng(cfg.seed, "edits");
    let (edit_sensitivity, _) = diag::edit_sweep(&params.encoder, view, cfg.hops, lipschitz.bound, SWEEP_PAIRS, &mut edit_rng)?;
    let probe_accuracies = diag::ambiguity_probe(prep, cfg)?;
    Ok(DiagnosticsReport {
        lipschitz_bound: lipschitz.bound,
        lipschitz,
        n,
        max_overlap,
        kappa: cfg.kappa,
        delta_max_bound,
        sigma_dep,
        delta: cfg.delta,
        sampling_term,
        boundary_mass,
        boundary_used_fallback: prep.boundaries.iter().map(|b| b.used_fallback).collect(),
        probe_accuracies,
        stability_violations: stability.violations,
        stability,
        edit_sensitivity,
        not_computed: [
            "wasserstein_to_reference",
            "structural_shift",
            "alignment_error",
            "boundary_approximation_constant",
            "edit_distance",
            "loss_lipschitz",
        ]
        .into_iter()
        .map(String::from)
        .collect(),
    })
}
