//! The pre-training loop.

use serde::{Deserialize, Serialize};

use crate::config::{IntraPool, RunConfig};
use crate::error::Result;
use crate::mix::{build_batch, sample_intra_pairs, SourceView};
use crate::nn::model::{loss_pretrain, ModelParams, PARAM_NAMES};
use crate::nn::{AdamConfig, AdamState};
use crate::pipeline::Prepared;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_dis: f64,
    pub loss_fine: f64,
    /// Share of all subgraphs whose gate opened.
    pub gate_fraction: f64,
    /// Share of inter-domain subgraphs whose gate opened.
    pub inter_gate_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

/// Node pools for intra-domain pairs, one per source domain.
pub fn intra_pools(prep: &Prepared, pool: IntraPool) -> Vec<(usize, Vec<usize>)> {
    match pool {
        IntraPool::All => prep
            .sources
            .iter()
            .map(|g| (g.domain_id, (0..g.num_nodes()).collect()))
            .collect(),
        IntraPool::Boundary => prep
            .boundaries
            .iter()
            .map(|b| (b.domain_id, b.node_ids.clone()))
            .collect(),
    }
}

/// Trains encoder, discriminator and decomposer for `epochs_pre` epochs.
///
/// The inter-domain pairs stay fixed; intra-domain pairs are redrawn every
/// epoch. Parameters are rounded to `f32` at the end so the returned model
/// equals its own checkpoint.
pub fn pretrain(prep: &Prepared, cfg: &RunConfig) -> Result<Pretrained> {
    let k = prep.sources.len();
    let mut params = ModelParams::init(cfg.pca_dim, cfg.hidden, k, &mut seed::rng(cfg.seed, "init"));
    let mut adam = AdamState::new(AdamConfig::new(cfg.lr_pre, cfg.weight_decay), params.tensors());
    let pools = intra_pools(prep, cfg.intra_pool);
    let view = SourceView {
        graphs: &prep.sources,
        aligned: &prep.aligned,
    };
    let mut log = Vec::with_capacity(cfg.epochs_pre);
    for epoch in 0..cfg.epochs_pre {
        let mut rng = seed::rng_indexed(cfg.seed, "epoch", epoch as u64);
        let intra = sample_intra_pairs(&pools, cfg.n_pairs, &mut rng)?;
        let batch = build_batch(&prep.inter_pairs, &intra, view, cfg.hops, cfg.lambda_mode, &mut rng)?;
        let out = loss_pretrain(&params, &batch, cfg.grl_beta)?;
        adam.step(&PARAM_NAMES, &mut params.tensors_mut(), &out.grads)?;
        log.push(EpochLog {
            epoch,
            loss_dis: out.loss_dis,
            loss_fine: out.loss_fine,
            gate_fraction: out.gate_fraction(),
            inter_gate_fraction: out.inter_gate_fraction(),
        });
    }
    params.round_to_f32();
    Ok(Pretrained { params, log })
}
