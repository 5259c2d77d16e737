//! Cross-domain pair selection and center-based subgraph mixing.

use std::collections::{BTreeSet, HashSet};

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::align::AlignedFeatures;
use crate::boundary::BoundarySet;
use crate::error::{Error, Result};
use crate::graph::{extract_ego, DomainGraph, EgoSubgraph};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodePair {
    pub domain_a: usize,
    pub node_a: usize,
    pub domain_b: usize,
    pub node_b: usize,
    /// Cosine similarity of the two aligned features; not computed for
    /// intra-domain pairs.
    pub similarity: Option<f64>,
}

impl NodePair {
    pub fn is_inter(&self) -> bool {
        self.domain_a != self.domain_b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub domain_a: usize,
    pub node_a: usize,
    pub domain_b: usize,
    pub node_b: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSubgraph {
    pub num_nodes: usize,
    /// Undirected, `a < b`, sorted, no duplicates or self-loops.
    pub edges: Vec<(usize, usize)>,
    pub features: Array2<f64>,
    pub merged_center: usize,
    /// 1 for inter-domain mixes, 0 for intra-domain mixes.
    pub coarse_label: u8,
    /// Domain composition over the `K` source domains.
    pub mix_label: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixBatch {
    pub inter: Vec<MixedSubgraph>,
    pub intra: Vec<MixedSubgraph>,
}

impl MixBatch {
    pub fn len(&self) -> usize {
        self.inter.len() + self.intra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inter subgraphs first, then intra.
    pub fn iter(&self) -> impl Iterator<Item = &MixedSubgraph> {
        self.inter.iter().chain(self.intra.iter())
    }
}

/// How the mixing coefficient is chosen for each mix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LambdaPolicy {
    Fixed(f64),
    /// `lambda ~ Beta(alpha, alpha)`, drawn per mix.
    Beta(f64),
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy::Fixed(0.5)
    }
}

impl LambdaPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LambdaPolicy::Fixed(l) if (0.0..=1.0).contains(&l) => Ok(()),
            LambdaPolicy::Beta(a) if a > 0.0 && a.is_finite() => Ok(()),
            other => Err(Error::Validation(format!("lambda_mode {other:?} is out of range"))),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            LambdaPolicy::Fixed(l) => l,
            LambdaPolicy::Beta(a) => Beta::new(a, a).expect("validated alpha").sample(rng),
        }
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine_sim(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let nx = x.dot(&x).sqrt();
    let ny = y.dot(&y).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Ok(0.0);
    }
    Ok(x.dot(&y) / (nx * ny))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSelection {
    pub pairs: Vec<NodePair>,
    /// How many pairs short of the request the selection came up, if any.
    pub shortfall: Option<usize>,
}

fn lex_key(p: &NodePair) -> (usize, usize, usize, usize) {
    (p.domain_a, p.node_a, p.domain_b, p.node_b)
}

/// Top-`n_pairs` cross-domain boundary pairs by cosine similarity among
/// those with similarity strictly above `gamma`.
pub fn select_pairs(
    boundary_sets: &[BoundarySet],
    aligned: &[AlignedFeatures],
    gamma: f64,
    n_pairs: usize,
) -> Result<PairSelection> {
    if boundary_sets.len() < 2 {
        return Err(Error::Usage("pair selection needs at least two domains".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Validation(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    let features = |domain: usize| -> Result<&AlignedFeatures> {
        aligned
            .iter()
            .find(|a| a.domain_id == domain)
            .ok_or_else(|| Error::Index(format!("no aligned features for domain {domain}")))
    };
    let mut qualifying = Vec::new();
    for (ia, sa) in boundary_sets.iter().enumerate() {
        let fa = features(sa.domain_id)?;
        for sb in &boundary_sets[ia + 1..] {
            let fb = features(sb.domain_id)?;
            for &u in &sa.node_ids {
                for &v in &sb.node_ids {
                    let sim = cosine_sim(fa.matrix.row(u), fb.matrix.row(v))?;
                    if sim > gamma {
                        let (da, na, db, nb) = if sa.domain_id < sb.domain_id {
                            (sa.domain_id, u, sb.domain_id, v)
                        } else {
                            (sb.domain_id, v, sa.domain_id, u)
                        };
                        qualifying.push(NodePair {
                            domain_a: da,
                            node_a: na,
                            domain_b: db,
                            node_b: nb,
                            similarity: Some(sim),
                        });
                    }
                }
            }
        }
    }
    if qualifying.is_empty() {
        return Err(Error::NoMixablePairs { gamma });
    }
    qualifying.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .expect("finite similarity")
            .then_with(|| lex_key(a).cmp(&lex_key(b)))
    });
    let shortfall = (qualifying.len() < n_pairs).then(|| n_pairs - qualifying.len());
    qualifying.truncate(n_pairs);
    Ok(PairSelection {
        pairs: qualifying,
        shortfall,
    })
}

/// Uniformly random cross-domain pairs over all nodes, ignoring boundaries
/// and similarity. This is the "random mixup" ablation.
pub fn random_pairs(aligned: &[AlignedFeatures], n_pairs: usize, rng: &mut Rng) -> Result<Vec<NodePair>> {
    let k = aligned.len();
    if k < 2 {
        return Err(Error::Usage("random pairing needs at least two domains".into()));
    }
    let mut out = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let a = rng.random_range(0..k);
        let mut b = rng.random_range(0..k - 1);
        if b >= a {
            b += 1;
        }
        let (a, b) = (a.min(b), a.max(b));
        let u = rng.random_range(0..aligned[a].num_nodes());
        let v = rng.random_range(0..aligned[b].num_nodes());
        out.push(NodePair {
            domain_a: aligned[a].domain_id,
            node_a: u,
            domain_b: aligned[b].domain_id,
            node_b: v,
            similarity: Some(cosine_sim(aligned[a].matrix.row(u), aligned[b].matrix.row(v))?),
        });
    }
    Ok(out)
}

/// Number of intra pairs for each of `k` domains: `n / k` each, with the
/// remainder handed to the lowest domain indices.
pub fn intra_pair_counts(n_pairs: usize, k: usize) -> Vec<usize> {
    (0..k)
        .map(|i| n_pairs / k + usize::from(i < n_pairs % k))
        .collect()
}

/// Samples distinct unordered same-domain pairs from each domain's pool.
/// `pools[i]` is `(domain_id, node ids)`.
pub fn sample_intra_pairs(pools: &[(usize, Vec<usize>)], n_pairs: usize, rng: &mut Rng) -> Result<Vec<NodePair>> {
    let counts = intra_pair_counts(n_pairs, pools.len());
    let mut out = Vec::with_capacity(n_pairs);
    for ((domain, pool), &want) in pools.iter().zip(&counts) {
        let p = pool.len();
        let available = p * p.saturating_sub(1) / 2;
        if p < 2 || want > available {
            return Err(Error::PoolTooSmall {
                domain: *domain,
                pool: p,
                requested: want,
            });
        }
        let mut seen = HashSet::with_capacity(want);
        while seen.len() < want {
            let i = rng.random_range(0..p);
            let j = rng.random_range(0..p - 1);
            let j = if j >= i { j + 1 } else { j };
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                out.push(NodePair {
                    domain_a: *domain,
                    node_a: pool[key.0],
                    domain_b: *domain,
                    node_b: pool[key.1],
                    similarity: None,
                });
            }
        }
    }
    Ok(out)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        parent[ra.max(rb)] = ra.min(rb);
    }
}

/// Result of identifying the nodes of two ego subgraphs: a map from each
/// input node (a-nodes first, then b-nodes) to its merged local index.
#[derive(Debug, Clone)]
pub(crate) struct Identification {
    pub local_of: Vec<usize>,
    pub num_nodes: usize,
    pub merged_center: usize,
    pub edges: Vec<(usize, usize)>,
}

pub(crate) fn identify(sub_a: &EgoSubgraph, sub_b: &EgoSubgraph) -> Identification {
    let na = sub_a.num_nodes();
    let nb = sub_b.num_nodes();
    let mut parent: Vec<usize> = (0..na + nb).collect();
    union(&mut parent, sub_a.center_local, na + sub_b.center_local);
    if sub_a.source_domain == sub_b.source_domain {
        for (jb, g) in sub_b.nodes_global.iter().enumerate() {
            if let Ok(ja) = sub_a.nodes_global.binary_search(g) {
                union(&mut parent, ja, na + jb);
            }
        }
    }
    // Roots are the smallest member of each class, so numbering classes in
    // order of first appearance gives a canonical local order.
    let mut local_of = vec![usize::MAX; na + nb];
    let mut next = 0;
    for x in 0..na + nb {
        let r = find(&mut parent, x);
        if local_of[r] == usize::MAX {
            local_of[r] = next;
            next += 1;
        }
        local_of[x] = local_of[r];
    }
    let relabel = |offset: usize, edges: &[(usize, usize)]| -> Vec<(usize, usize)> {
        edges
            .iter()
            .map(|&(u, v)| {
                let (x, y) = (local_of[offset + u], local_of[offset + v]);
                (x.min(y), x.max(y))
            })
            .filter(|(x, y)| x != y)
            .collect()
    };
    let edges: BTreeSet<(usize, usize)> = relabel(0, &sub_a.edges_local)
        .into_iter()
        .chain(relabel(na, &sub_b.edges_local))
        .collect();
    Identification {
        merged_center: local_of[sub_a.center_local],
        local_of,
        num_nodes: next,
        edges: edges.into_iter().collect(),
    }
}

/// Merges two ego subgraphs: the centers become one node with feature
/// `lambda * x_a + (1 - lambda) * x_b`, shared node ids are identified when
/// both come from the same graph, and the edge set is the union.
pub fn mix_subgraphs(
    sub_a: &EgoSubgraph,
    sub_b: &EgoSubgraph,
    lambda: f64,
    num_domains: usize,
) -> Result<MixedSubgraph> {
    let d = sub_a.features.ncols();
    if sub_b.features.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "mixing subgraphs with feature widths {d} and {}",
            sub_b.features.ncols()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Validation(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    for dom in [sub_a.source_domain, sub_b.source_domain] {
        if dom >= num_domains {
            return Err(Error::Index(format!("domain {dom} with {num_domains} domains")));
        }
    }
    let ident = identify(sub_a, sub_b);
    let na = sub_a.num_nodes();
    let mut features = Array2::zeros((ident.num_nodes, d));
    let mut filled = vec![false; ident.num_nodes];
    // a-rows take precedence over b-rows for identified non-center nodes.
    for (x, &l) in ident.local_of.iter().enumerate() {
        if filled[l] {
            continue;
        }
        let row = if x < na {
            sub_a.features.row(x)
        } else {
            sub_b.features.row(x - na)
        };
        features.row_mut(l).assign(&row);
        filled[l] = true;
    }
    let center: Array1<f64> = &sub_a.features.row(sub_a.center_local) * lambda
        + &sub_b.features.row(sub_b.center_local) * (1.0 - lambda);
    features.row_mut(ident.merged_center).assign(&center);

    let mut mix_label = vec![0.0; num_domains];
    mix_label[sub_a.source_domain] += lambda;
    mix_label[sub_b.source_domain] += 1.0 - lambda;
    Ok(MixedSubgraph {
        num_nodes: ident.num_nodes,
        edges: ident.edges,
        features,
        merged_center: ident.merged_center,
        coarse_label: u8::from(sub_a.source_domain != sub_b.source_domain),
        mix_label,
        provenance: Provenance {
            domain_a: sub_a.source_domain,
            node_a: sub_a.center_global,
            domain_b: sub_b.source_domain,
            node_b: sub_b.center_global,
            lambda,
        },
    })
}

/// Source graphs and their aligned features, indexed by domain id.
#[derive(Debug, Clone, Copy)]
pub struct SourceView<'a> {
    pub graphs: &'a [DomainGraph],
    pub aligned: &'a [AlignedFeatures],
}

impl<'a> SourceView<'a> {
    pub fn ego(&self, domain: usize, node: usize, hops: usize) -> Result<EgoSubgraph> {
        let g = self
            .graphs
            .get(domain)
            .ok_or_else(|| Error::Index(format!("no source graph {domain}")))?;
        extract_ego(g, node, hops, &self.aligned[domain])
    }

    pub fn num_domains(&self) -> usize {
        self.graphs.len()
    }
}

pub fn mix_pair(view: SourceView<'_>, pair: &NodePair, hops: usize, lambda: f64) -> Result<MixedSubgraph> {
    let a = view.ego(pair.domain_a, pair.node_a, hops)?;
    let b = view.ego(pair.domain_b, pair.node_b, hops)?;
    mix_subgraphs(&a, &b, lambda, view.num_domains())
}

pub fn build_batch(
    inter_pairs: &[NodePair],
    intra_pairs: &[NodePair],
    view: SourceView<'_>,
    hops: usize,
    policy: LambdaPolicy,
    rng: &mut Rng,
) -> Result<MixBatch> {
    if hops == 0 {
        return Err(Error::Validation("hops must be at least 1".into()));
    }
    policy.validate()?;
    let mut run = |pairs: &[NodePair]| -> Result<Vec<MixedSubgraph>> {
        pairs
            .iter()
            .map(|p| mix_pair(view, p, hops, policy.sample(rng)))
            .collect()
    };
    let inter = run(inter_pairs)?;
    let intra = run(intra_pairs)?;
    Ok(MixBatch { inter, intra })
}
