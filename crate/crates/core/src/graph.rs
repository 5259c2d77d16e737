//! Domain graphs in CSR form and h-hop ego-subgraph extraction.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::align::AlignedFeatures;
use crate::error::{Error, Result};
use crate::formats;

/// One domain: undirected, unweighted topology plus raw node features.
///
/// Storage is canonical: neighbor lists are sorted, deduplicated, symmetric
/// and free of self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainGraph {
    pub domain_id: usize,
    row_offsets: Vec<usize>,
    col_targets: Vec<usize>,
    pub features_raw: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

impl DomainGraph {
    /// Builds a graph from an arbitrary edge list. Edges are symmetrized and
    /// deduplicated; self-loops are dropped.
    pub fn from_edges(
        domain_id: usize,
        edges: &[(usize, usize)],
        features_raw: Array2<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = features_raw.nrows();
        if n == 0 {
            return Err(Error::EmptyGraph(format!("domain {domain_id} has no nodes")));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} labels for {n} nodes",
                    l.len()
                )));
            }
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::DimensionMismatch(format!(
                    "edge ({u}, {v}) references a node beyond the {n} feature rows"
                )));
            }
            if u != v {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_targets = Vec::new();
        row_offsets.push(0);
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
            col_targets.extend_from_slice(list);
            row_offsets.push(col_targets.len());
        }
        Ok(Self {
            domain_id,
            row_offsets,
            col_targets,
            features_raw,
            labels,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.row_offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.col_targets.len() / 2
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_targets(&self) -> &[usize] {
        &self.col_targets
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.col_targets[self.row_offsets[u]..self.row_offsets[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.row_offsets[u + 1] - self.row_offsets[u]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edges as `(u, v)` with `u < v`, in CSR order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes())
            .flat_map(|u| {
                self.neighbors(u)
                    .iter()
                    .filter(move |&&v| u < v)
                    .map(move |&v| (u, v))
            })
            .collect()
    }

    pub fn raw_dim(&self) -> usize {
        self.features_raw.ncols()
    }

    /// Keeps only the nodes with `keep[i] == true`, relabeling them in order.
    pub fn retain_nodes(&self, keep: &[bool]) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.num_nodes()];
        let mut kept = Vec::new();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                remap[i] = kept.len();
                kept.push(i);
            }
        }
        let edges: Vec<(usize, usize)> = self
            .edges()
            .into_iter()
            .filter(|&(u, v)| keep[u] && keep[v])
            .map(|(u, v)| (remap[u], remap[v]))
            .collect();
        let features = self.features_raw.select(Axis(0), &kept);
        let labels = self
            .labels
            .as_ref()
            .map(|l| kept.iter().map(|&i| l[i]).collect());
        Self::from_edges(self.domain_id, &edges, features, labels)
    }

    /// Nodes within `hops` of `center`, sorted ascending.
    pub fn ball(&self, center: usize, hops: usize) -> Vec<usize> {
        let mut dist: HashMap<usize, usize> = HashMap::new();
        dist.insert(center, 0);
        let mut queue = VecDeque::from([center]);
        while let Some(u) = queue.pop_front() {
            let du = dist[&u];
            if du == hops {
                continue;
            }
            for &v in self.neighbors(u) {
                if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(v) {
                    e.insert(du + 1);
                    queue.push_back(v);
                }
            }
        }
        let mut nodes: Vec<usize> = dist.into_keys().collect();
        nodes.sort_unstable();
        nodes
    }

    /// Induced edges among a sorted node set, as local index pairs `(a, b)`, `a < b`.
    pub fn induced_edges(&self, nodes: &[usize]) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for (a, &u) in nodes.iter().enumerate() {
            for &v in self.neighbors(u) {
                if v > u {
                    if let Ok(b) = nodes.binary_search(&v) {
                        edges.push((a, b));
                    }
                }
            }
        }
        edges
    }
}

/// Loads a domain from an edge list, a feature matrix and optional labels.
pub fn load_graph(
    edge_path: &Path,
    feature_path: &Path,
    domain_id: usize,
    labels_path: Option<&Path>,
) -> Result<DomainGraph> {
    let edges = formats::read_edge_list(edge_path)?;
    if edges.is_empty() {
        return Err(Error::EmptyGraph(format!(
            "{} contains no edges",
            edge_path.display()
        )));
    }
    let features = formats::read_matrix(feature_path)?;
    if let Some(bad) = features.iter().find(|x| !x.is_finite()) {
        return Err(Error::Validation(format!(
            "{}: non-finite feature value {bad}",
            feature_path.display()
        )));
    }
    let labels = labels_path.map(formats::read_labels).transpose()?;
    DomainGraph::from_edges(domain_id, &edges, features, labels)
}

/// Induced h-hop neighborhood around one node, with aligned features.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoSubgraph {
    pub source_domain: usize,
    pub center_global: usize,
    pub center_local: usize,
    pub nodes_global: Vec<usize>,
    pub edges_local: Vec<(usize, usize)>,
    pub features: Array2<f64>,
}

impl EgoSubgraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes_global.len()
    }

    pub fn node_set(&self) -> BTreeSet<usize> {
        self.nodes_global.iter().copied().collect()
    }
}

pub fn extract_ego(
    graph: &DomainGraph,
    center: usize,
    hops: usize,
    aligned: &AlignedFeatures,
) -> Result<EgoSubgraph> {
    if center >= graph.num_nodes() {
        return Err(Error::Index(format!(
            "center {center} in a graph of {} nodes",
            graph.num_nodes()
        )));
    }
    if hops == 0 {
        return Err(Error::Validation("hops must be at least 1".into()));
    }
    if aligned.matrix.nrows() != graph.num_nodes() {
        return Err(Error::DimensionMismatch(format!(
            "aligned features have {} rows for {} nodes",
            aligned.matrix.nrows(),
            graph.num_nodes()
        )));
    }
    let nodes = graph.ball(center, hops);
    let center_local = nodes.binary_search(&center).expect("center is in its own ball");
    let edges_local = graph.induced_edges(&nodes);
    let features = aligned.matrix.select(Axis(0), &nodes);
    Ok(EgoSubgraph {
        source_domain: graph.domain_id,
        center_global: center,
        center_local,
        nodes_global: nodes,
        edges_local,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn graph(n: usize, edges: &[(usize, usize)]) -> DomainGraph {
        DomainGraph::from_edges(0, edges, Array2::zeros((n, 2)), None).unwrap()
    }

    fn aligned(g: &DomainGraph) -> AlignedFeatures {
        let m = Array2::from_shape_fn((g.num_nodes(), 2), |(i, j)| (i * 2 + j) as f64);
        AlignedFeatures::new(g.domain_id, m)
    }

    #[test]
    fn single_edge_csr() {
        let g = graph(2, &[(0, 1)]);
        assert_eq!(g.row_offsets(), &[0, 1, 2]);
        assert!(g.has_edge(0, 1) && g.has_edge(1, 0));
    }

    #[test]
    fn duplicate_and_reversed_edges_collapse() {
        let g = graph(2, &[(0, 1), (1, 0), (0, 1)]);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.col_targets(), &[1, 0]);
    }

    #[test]
    fn self_loops_are_stripped() {
        let g = graph(3, &[(0, 0), (0, 1), (2, 2)]);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.degree(2), 0);
    }

    #[test]
    fn out_of_range_edge_is_dimension_error() {
        let err = DomainGraph::from_edges(0, &[(0, 5)], Array2::zeros((3, 1)), None).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn star_hop_one() {
        let g = graph(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        let ego = extract_ego(&g, 0, 1, &aligned(&g)).unwrap();
        assert_eq!(ego.nodes_global, vec![0, 1, 2, 3, 4]);
        assert_eq!(ego.edges_local.len(), 4);
        assert_eq!(ego.center_local, 0);
    }

    #[test]
    fn path_excludes_far_edge() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let ego = extract_ego(&g, 0, 1, &aligned(&g)).unwrap();
        assert_eq!(ego.nodes_global, vec![0, 1]);
        assert_eq!(ego.edges_local, vec![(0, 1)]);
        assert_eq!(ego.features.row(1).to_vec(), vec![2.0, 3.0]);
    }

    #[test]
    fn ego_errors() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let a = aligned(&g);
        assert!(matches!(extract_ego(&g, 3, 1, &a), Err(Error::Index(_))));
        assert!(extract_ego(&g, 0, 0, &a).is_err());
    }

    #[test]
    fn retain_relabels() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let r = g.retain_nodes(&[true, false, true, true]).unwrap();
        assert_eq!(r.num_nodes(), 3);
        assert_eq!(r.edges(), vec![(1, 2)]);
    }
}
