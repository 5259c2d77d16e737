//! Row-compressed sparse matrices and GCN adjacency normalization.

use ndarray::Array2;

use crate::graph::DomainGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(col, value)` lists.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in &rows {
            for &(c, v) in row {
                debug_assert!(c < cols);
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `self * x`
    pub fn mul_dense(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.cols, x.nrows(), "sparse-dense shape mismatch");
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            let mut dst = out.row_mut(r);
            for (c, w) in self.row(r) {
                dst.scaled_add(w, &x.row(c));
            }
        }
        out
    }

    /// `self^T * g`
    pub fn t_mul_dense(&self, g: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.rows, g.nrows(), "sparse-dense shape mismatch");
        let mut out = Array2::zeros((self.cols, g.ncols()));
        for r in 0..self.rows {
            let src = g.row(r);
            for (c, w) in self.row(r) {
                out.row_mut(c).scaled_add(w, &src);
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, w) in self.row(r) {
                out[[r, c]] += w;
            }
        }
        out
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` for an undirected graph given as local edge
/// pairs. Duplicate edges and self-loops in `edges` are ignored.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> SparseMatrix {
    let mut adj: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for &(u, v) in edges {
        if u != v {
            adj[u].push(v);
            adj[v].push(u);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let inv_sqrt: Vec<f64> = adj.iter().map(|l| 1.0 / (l.len() as f64).sqrt()).collect();
    let rows = adj
        .iter()
        .enumerate()
        .map(|(u, l)| l.iter().map(|&v| (v, inv_sqrt[u] * inv_sqrt[v])).collect())
        .collect();
    SparseMatrix::from_rows(n, rows)
}

/// Normalized adjacency of a whole domain graph, able to hand out exact
/// row/column blocks so a GCN can be evaluated on a few rows only.
#[derive(Debug, Clone)]
pub struct GraphAdjacency<'a> {
    graph: &'a DomainGraph,
    inv_sqrt_deg: Vec<f64>,
}

impl<'a> GraphAdjacency<'a> {
    pub fn new(graph: &'a DomainGraph) -> Self {
        let inv_sqrt_deg = (0..graph.num_nodes())
            .map(|u| 1.0 / ((graph.degree(u) + 1) as f64).sqrt())
            .collect();
        Self { graph, inv_sqrt_deg }
    }

    /// Closed neighborhood of a sorted node set, sorted.
    pub fn expand(&self, nodes: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = nodes
            .iter()
            .flat_map(|&u| std::iter::once(u).chain(self.graph.neighbors(u).iter().copied()))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// `A~[rows, cols]` with full-graph degrees. `cols` must be sorted.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> SparseMatrix {
        let entries = rows
            .iter()
            .map(|&u| {
                std::iter::once(u)
                    .chain(self.graph.neighbors(u).iter().copied())
                    .filter_map(|v| {
                        cols.binary_search(&v)
                            .ok()
                            .map(|c| (c, self.inv_sqrt_deg[u] * self.inv_sqrt_deg[v]))
                    })
                    .collect()
            })
            .collect();
        SparseMatrix::from_rows(cols.len(), entries)
    }

    pub fn full(&self) -> SparseMatrix {
        let all: Vec<usize> = (0..self.graph.num_nodes()).collect();
        self.block(&all, &all)
    }
}
