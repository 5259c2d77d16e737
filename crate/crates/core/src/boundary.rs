//! Boundary-node selection.
//!
//! A node of domain `k` is boundary-like when its distances to the centers
//! of `k` and of some other domain `m` are nearly equal. Per domain pair the
//! margins are min-max normalized into confidences, the top `ceil(rho*|V|)`
//! nodes form a candidate set, and the boundary set is the intersection of
//! the candidate sets over all `m != k` (their union if that is empty).

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::align::{AlignedFeatures, DomainCenter};
use crate::error::{Error, Result};

/// Euclidean distance from every node of one domain to every domain center.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    pub domain_id: usize,
    /// `|V| x K`
    pub matrix: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub domain_id: usize,
    pub node_ids: Vec<usize>,
    /// Parallel to `node_ids`.
    pub confidences: Vec<f64>,
    pub used_fallback: bool,
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }
}

/// Candidate set for one ordered domain pair, with the confidences of every
/// node of the domain (needed to report consensus scores).
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub other_domain: usize,
    pub nodes: BTreeSet<usize>,
    pub confidences: Vec<f64>,
}

pub fn center_distances(aligned: &AlignedFeatures, centers: &[DomainCenter]) -> Result<DistanceTable> {
    let d = aligned.dim();
    for (k, c) in centers.iter().enumerate() {
        if c.domain_id != k {
            return Err(Error::Validation(format!(
                "centers must be ordered by domain id; slot {k} holds domain {}",
                c.domain_id
            )));
        }
        if c.vector.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "center {k} has dimension {}, features have {d}",
                c.vector.len()
            )));
        }
    }
    let n = aligned.num_nodes();
    let matrix = Array2::from_shape_fn((n, centers.len()), |(i, k)| {
        aligned
            .matrix
            .row(i)
            .iter()
            .zip(&centers[k].vector)
            .map(|(x, c)| (x - c) * (x - c))
            .sum::<f64>()
            .sqrt()
    });
    Ok(DistanceTable {
        domain_id: aligned.domain_id,
        matrix,
    })
}

pub fn pairwise_margin(distances: &DistanceTable, k: usize, m: usize) -> Result<Vec<f64>> {
    let kk = distances.matrix.ncols();
    if k == m {
        return Err(Error::Usage(format!("margin needs two distinct domains, got {k} twice")));
    }
    if k >= kk || m >= kk {
        return Err(Error::Index(format!("domain pair ({k}, {m}) with {kk} centers")));
    }
    Ok(distances
        .matrix
        .rows()
        .into_iter()
        .map(|r| (r[k] - r[m]).abs())
        .collect())
}

/// `1 - minmax(margin)`; all ones when every margin is equal.
pub fn confidence_scores(margins: &[f64]) -> Vec<f64> {
    let lo = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![1.0; margins.len()];
    }
    margins.iter().map(|&m| 1.0 - (m - lo) / span).collect()
}

/// `ceil(rho * n)`, tolerant of representation error in `rho * n` and
/// clamped to `[1, n]`.
pub fn candidate_count(rho: f64, n: usize) -> usize {
    let x = rho * n as f64;
    let c = (x - 1e-9 * x.max(1.0)).ceil() as usize;
    c.clamp(1, n.max(1)).min(n)
}

/// Top `ceil(rho*|V|)` nodes by confidence; ties go to the lower node id.
pub fn select_candidates(confidences: &[f64], rho: f64) -> Result<BTreeSet<usize>> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Validation(format!("rho must lie in (0, 1), got {rho}")));
    }
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| {
        confidences[b]
            .partial_cmp(&confidences[a])
            .expect("finite confidences")
            .then(a.cmp(&b))
    });
    Ok(order
        .into_iter()
        .take(candidate_count(rho, confidences.len()))
        .collect())
}

pub fn boundary_set(domain_id: usize, candidate_sets: &[CandidateSet]) -> Result<BoundarySet> {
    let Some(first) = candidate_sets.first() else {
        return Err(Error::Usage("boundary consensus needs at least one candidate set".into()));
    };
    let intersection: BTreeSet<usize> = candidate_sets[1..]
        .iter()
        .fold(first.nodes.clone(), |acc, c| acc.intersection(&c.nodes).copied().collect());
    let (nodes, used_fallback) = if intersection.is_empty() {
        let union = candidate_sets
            .iter()
            .flat_map(|c| c.nodes.iter().copied())
            .collect::<BTreeSet<_>>();
        (union, true)
    } else {
        (intersection, false)
    };
    let node_ids: Vec<usize> = nodes.into_iter().collect();
    let confidences = node_ids
        .iter()
        .map(|&i| {
            let (sum, count) = candidate_sets
                .iter()
                .filter(|c| c.nodes.contains(&i))
                .fold((0.0, 0usize), |(s, n), c| (s + c.confidences[i], n + 1));
            sum / count as f64
        })
        .collect();
    Ok(BoundarySet {
        domain_id,
        node_ids,
        confidences,
        used_fallback,
    })
}

/// Runs the full selection for every source domain.
pub fn select_boundaries(aligned: &[AlignedFeatures], centers: &[DomainCenter], rho: f64) -> Result<Vec<BoundarySet>> {
    if aligned.len() < 2 {
        return Err(Error::Usage(format!(
            "boundary selection needs at least two source domains, got {}",
            aligned.len()
        )));
    }
    aligned
        .iter()
        .map(|a| {
            let k = a.domain_id;
            let table = center_distances(a, centers)?;
            let sets = (0..centers.len())
                .filter(|&m| m != k)
                .map(|m| {
                    let confidences = confidence_scores(&pairwise_margin(&table, k, m)?);
                    Ok(CandidateSet {
                        other_domain: m,
                        nodes: select_candidates(&confidences, rho)?,
                        confidences,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            boundary_set(k, &sets)
        })
        .collect()
}
