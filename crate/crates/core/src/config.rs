//! Run configuration and synthetic-data parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::AlignMode;
use crate::error::{Error, Result};
use crate::mix::LambdaPolicy;

/// Where inter-domain pairs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    /// Top-N similar pairs among boundary nodes.
    #[default]
    Boundary,
    /// Uniformly random cross-domain node pairs (ablation).
    Random,
}

/// Which nodes intra-domain pairs are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntraPool {
    All,
    #[default]
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    #[default]
    Node,
    Graph,
}

impl std::fmt::Display for TaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskMode::Node => "node",
            TaskMode::Graph => "graph",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub pca_dim: usize,
    pub hidden: usize,
    pub hops: usize,
    pub n_pairs: usize,
    pub rho: f64,
    pub gamma: f64,
    pub lambda_mode: LambdaPolicy,
    pub grl_beta: f64,
    pub lr_pre: f64,
    pub lr_down: f64,
    pub weight_decay: f64,
    pub epochs_pre: usize,
    pub steps_adapt: usize,
    pub tau: f64,
    pub shots: usize,
    pub repeats: usize,
    pub mode: TaskMode,
    pub pair_strategy: PairStrategy,
    pub intra_pool: IntraPool,
    pub align_mode: AlignMode,
    pub standardize: bool,
    pub kappa: f64,
    pub delta: f64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_center_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pca_dim: 50,
            hidden: 256,
            hops: 1,
            n_pairs: 10,
            rho: 0.3,
            gamma: 0.5,
            lambda_mode: LambdaPolicy::Fixed(0.5),
            grl_beta: 1.0,
            lr_pre: 1e-4,
            lr_down: 1e-3,
            weight_decay: 1e-4,
            epochs_pre: 100,
            steps_adapt: 200,
            tau: 1.0,
            shots: 1,
            repeats: 100,
            mode: TaskMode::Node,
            pair_strategy: PairStrategy::Boundary,
            intra_pool: IntraPool::Boundary,
            align_mode: AlignMode::Joint,
            standardize: false,
            kappa: 0.25,
            delta: 0.05,
            probe_epochs: 50,
            probe_lr: 1e-2,
            probe_center_fraction: 0.1,
        }
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Validation(format!("{field} {msg}"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(invalid("rho", format_args!("must lie in (0, 1), got {}", self.rho)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(invalid("gamma", format_args!("must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0) {
            return Err(invalid("tau", format_args!("must be positive, got {}", self.tau)));
        }
        for (name, v) in [
            ("lr_pre", self.lr_pre),
            ("lr_down", self.lr_down),
            ("probe_lr", self.probe_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format_args!("must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        for (name, v) in [
            ("pca_dim", self.pca_dim),
            ("hidden", self.hidden),
            ("hops", self.hops),
            ("n_pairs", self.n_pairs),
            ("shots", self.shots),
            ("repeats", self.repeats),
        ] {
            if v == 0 {
                return Err(invalid(name, "must be at least 1"));
            }
        }
        if !(0.0..=0.25).contains(&self.kappa) {
            return Err(invalid("kappa", format_args!("must lie in [0, 0.25], got {}", self.kappa)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta", format_args!("must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.probe_center_fraction > 0.0 && self.probe_center_fraction <= 1.0) {
            return Err(invalid("probe_center_fraction", "must lie in (0, 1]"));
        }
        self.lambda_mode
            .validate()
            .map_err(|_| invalid("lambda_mode", format_args!("{:?} is out of range", self.lambda_mode)))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parameters of the synthetic multi-domain generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Number of source domains. One extra held-out target domain is
    /// generated after them.
    pub k: usize,
    pub nodes_per_domain: usize,
    pub classes_per_domain: usize,
    /// Edge probability inside a class block.
    pub intra_edge_prob: f64,
    /// Edge probability between class blocks.
    pub inter_block_prob: f64,
    pub feature_dim: usize,
    pub domain_center_separation: f64,
    /// Fraction of each domain's nodes whose features come from the shared
    /// Gaussian at the midpoint of the domain centers.
    pub boundary_cluster_fraction: f64,
    pub class_separation: f64,
    pub noise_std: f64,
    /// Norm of a constant offset shared by every domain.
    pub global_offset: f64,
    /// Use the same class means in every domain, so that domains differ
    /// only by their center. Otherwise each domain draws its own.
    pub shared_class_means: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            k: 3,
            nodes_per_domain: 300,
            classes_per_domain: 3,
            intra_edge_prob: 0.05,
            inter_block_prob: 0.005,
            feature_dim: 64,
            domain_center_separation: 4.0,
            boundary_cluster_fraction: 0.3,
            class_separation: 2.0,
            noise_std: 0.6,
            global_offset: 3.0,
            shared_class_means: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("intra_edge_prob", self.intra_edge_prob),
            ("inter_block_prob", self.inter_block_prob),
            ("boundary_cluster_fraction", self.boundary_cluster_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(name, format_args!("must lie in [0, 1], got {p}")));
            }
        }
        if !(self.domain_center_separation > 0.0) {
            return Err(invalid("domain_center_separation", "must be positive"));
        }
        if !(self.noise_std >= 0.0) || !(self.class_separation >= 0.0) || !(self.global_offset >= 0.0) {
            return Err(invalid("noise_std/class_separation/global_offset", "must be non-negative"));
        }
        for (name, v) in [
            ("k", self.k),
            ("nodes_per_domain", self.nodes_per_domain),
            ("classes_per_domain", self.classes_per_domain),
            ("feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                return Err(invalid(name, "must be at least 1"));
            }
        }
        Ok(())
    }
}
