//! Seeded synthetic multi-domain graphs.
//!
//! Every domain is a stochastic block model whose blocks are the classes.
//! Node features are Gaussian around `offset + domain center + class mean`,
//! except for a planted share of nodes whose domain part is replaced by the
//! midpoint of the source domain centers. Those nodes sit between domains
//! and are what boundary selection should find.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::SynthSpec;
use crate::error::{Error, Result};
use crate::formats;
use crate::graph::{load_graph, DomainGraph};
use crate::seed::{self, Rng};

/// Source domains followed by one held-out target domain.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub sources: Vec<DomainGraph>,
    pub target: DomainGraph,
    /// Planted midpoint-cluster nodes per domain, sources then target.
    pub planted: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub domain_id: usize,
    pub edges: String,
    pub features: String,
    pub labels: String,
    pub planted: Vec<usize>,
}

/// Index file written next to the generated domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: SynthSpec,
    pub sources: Vec<DomainEntry>,
    pub target: DomainEntry,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn gaussian_vec(rng: &mut Rng, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal))
}

fn unit_vec(rng: &mut Rng, dim: usize) -> Array1<f64> {
    let v = gaussian_vec(rng, dim);
    let n = v.dot(&v).sqrt();
    if n == 0.0 {
        let mut e = Array1::zeros(dim);
        e[0] = 1.0;
        e
    } else {
        v / n
    }
}

fn sbm_edges(labels: &[usize], p_in: f64, p_out: f64, rng: &mut Rng) -> Vec<(usize, usize)> {
    let n = labels.len();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    edges
}

/// Generates `spec.k` source domains plus one target domain.
///
/// Features are rounded to `f32` so that the in-memory result matches what
/// [`write_synth`] puts on disk.
pub fn gen_synth(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = seed::rng(seed, "synth");
    let dim = spec.feature_dim;
    let total = spec.k + 1;
    // Pairwise distance between two random centers is about `separation`.
    let radius = spec.domain_center_separation / std::f64::consts::SQRT_2;
    let offset = unit_vec(&mut rng, dim) * spec.global_offset;
    let centers: Vec<Array1<f64>> = (0..total).map(|_| unit_vec(&mut rng, dim) * radius).collect();
    let midpoint = centers[..spec.k]
        .iter()
        .fold(Array1::zeros(dim), |acc, c| acc + c)
        / spec.k as f64;

    let draw_means = |rng: &mut Rng| -> Vec<Array1<f64>> {
        (0..spec.classes_per_domain)
            .map(|_| unit_vec(rng, dim) * spec.class_separation)
            .collect()
    };
    let shared_means = draw_means(&mut rng);

    let mut graphs = Vec::with_capacity(total);
    let mut planted = Vec::with_capacity(total);
    for (k, center) in centers.iter().enumerate() {
        let n = spec.nodes_per_domain;
        let class_means = if spec.shared_class_means {
            shared_means.clone()
        } else {
            draw_means(&mut rng)
        };
        let labels: Vec<usize> = (0..n).map(|i| i * spec.classes_per_domain / n).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_planted = (spec.boundary_cluster_fraction * n as f64).round() as usize;
        let mut shared: Vec<usize> = order[..n_planted.min(n)].to_vec();
        shared.sort_unstable();
        let mut is_shared = vec![false; n];
        for &i in &shared {
            is_shared[i] = true;
        }
        let mut features = Array2::zeros((n, dim));
        for i in 0..n {
            let base = if is_shared[i] { &midpoint } else { center };
            let noise = gaussian_vec(&mut rng, dim) * spec.noise_std;
            let x = &offset + base + &class_means[labels[i]] + noise;
            features.row_mut(i).assign(&x.mapv(|v| v as f32 as f64));
        }
        let edges = sbm_edges(&labels, spec.intra_edge_prob, spec.inter_block_prob, &mut rng);
        graphs.push(DomainGraph::from_edges(k, &edges, features, Some(labels))?);
        planted.push(shared);
    }
    let target = graphs.pop().expect("k + 1 domains");
    Ok(SynthData {
        sources: graphs,
        target,
        planted,
    })
}

fn write_domain(dir: &Path, g: &DomainGraph, planted: &[usize]) -> Result<DomainEntry> {
    let entry = DomainEntry {
        domain_id: g.domain_id,
        edges: format!("domain_{}.edges", g.domain_id),
        features: format!("domain_{}.feat", g.domain_id),
        labels: format!("domain_{}.labels", g.domain_id),
        planted: planted.to_vec(),
    };
    formats::write_edge_list(&dir.join(&entry.edges), &g.edges())?;
    formats::write_matrix(&dir.join(&entry.features), &g.features_raw)?;
    formats::write_labels(&dir.join(&entry.labels), g.labels.as_deref().unwrap_or(&[]))?;
    Ok(entry)
}

/// Writes every domain and a manifest into `dir` (created if missing).
pub fn write_synth(dir: &Path, data: &SynthData, spec: &SynthSpec, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sources = data
        .sources
        .iter()
        .zip(&data.planted)
        .map(|(g, p)| write_domain(dir, g, p))
        .collect::<Result<Vec<_>>>()?;
    let target = write_domain(dir, &data.target, &data.planted[data.sources.len()])?;
    let manifest = Manifest {
        seed,
        spec: spec.clone(),
        sources,
        target,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn read_domain(dir: &Path, entry: &DomainEntry) -> Result<DomainGraph> {
    load_graph(
        &dir.join(&entry.edges),
        &dir.join(&entry.features),
        entry.domain_id,
        Some(&dir.join(&entry.labels)),
    )
}

/// Reads a directory written by [`write_synth`].
pub fn read_dataset(dir: &Path) -> Result<SynthData> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let sources = manifest
        .sources
        .iter()
        .map(|e| read_domain(dir, e))
        .collect::<Result<Vec<_>>>()?;
    let target = read_domain(dir, &manifest.target)?;
    let mut planted: Vec<Vec<usize>> = manifest.sources.iter().map(|e| e.planted.clone()).collect();
    planted.push(manifest.target.planted.clone());
    Ok(SynthData {
        sources,
        target,
        planted,
    })
}
