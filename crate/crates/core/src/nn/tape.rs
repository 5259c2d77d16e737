//! A small reverse-mode differentiation tape over 2-D `f64` arrays.
//!
//! Values are recorded in creation order; [`Tape::backward`] walks them in
//! reverse and accumulates gradients for every node that depends on a leaf.
//! Scalars are `1 x 1`.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use super::sparse::SparseMatrix;

/// Lower clamp applied to probabilities before every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    SpMM(Rc<SparseMatrix>, Var),
    Relu(Var),
    MeanRows(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Vec<f64>),
    Scale(Var, f64),
    Add(Var, Var),
    Grl(Var, f64),
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GroupMean(Var, Vec<Vec<usize>>),
    CosineMatrix(Var, Var),
    CrossEntropy(Var, Array2<f64>),
    MaskedKl(Var, Array2<f64>, Vec<bool>),
    LogSoftmaxNll(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to the leaves of a tape. Interior
/// buffers are released during the reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`, zero-filled if nothing flowed into it.
    pub fn get(&self, v: Var) -> Array2<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_FLOOR {
        (PROB_FLOOR, false)
    } else if p > 1.0 - PROB_FLOOR {
        (1.0 - PROB_FLOOR, false)
    } else {
        (p, true)
    }
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

fn row_norms(x: &Array2<f64>) -> Vec<f64> {
    x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A value that never receives a gradient; work that would only feed
    /// constants is skipped in the reverse pass.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const)
    }

    /// Whether each node depends on at least one leaf.
    fn tracked(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let t = match &node.op {
                Op::Leaf => true,
                Op::Const => false,
                Op::MatMul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) | Op::Add(a, b) | Op::CosineMatrix(a, b) => {
                    out[a.0] || out[b.0]
                }
                Op::ConcatRows(parts) => parts.iter().any(|p| out[p.0]),
                Op::SpMM(_, a)
                | Op::Relu(a)
                | Op::MeanRows(a)
                | Op::ScaleRows(a, _)
                | Op::Scale(a, _)
                | Op::Grl(a, _)
                | Op::SoftmaxRows(a)
                | Op::GatherRows(a, _)
                | Op::GroupMean(a, _)
                | Op::CrossEntropy(a, _)
                | Op::MaskedKl(a, _, _)
                | Op::LogSoftmaxNll(a, _) => out[a.0],
            };
            out.push(t);
        }
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Constant sparse matrix times `b`.
    pub fn spmm(&mut self, adj: Rc<SparseMatrix>, b: Var) -> Var {
        let v = adj.mul_dense(self.value(b));
        self.push(v, Op::SpMM(adj, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Column-wise mean over rows, `1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    /// `a + row` with `row` (`1 x m`) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a ⊙ row` with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    /// Multiplies row `i` by the constant `scales[i]`.
    pub fn scale_rows(&mut self, a: Var, scales: Vec<f64>) -> Var {
        let mut v = self.value(a).clone();
        for (mut row, &s) in v.rows_mut().into_iter().zip(&scales) {
            row *= s;
        }
        self.push(v, Op::ScaleRows(a, scales))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Identity forward; multiplies the incoming gradient by `-beta`.
    pub fn grl(&mut self, a: Var, beta: f64) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Grl(a, beta))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        self.push(v, Op::GatherRows(a, idx))
    }

    /// Row `g` of the output is the mean of rows `groups[g]` of `a`.
    pub fn group_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((groups.len(), x.ncols()));
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "empty group");
            let mut row = v.row_mut(g);
            for &i in members {
                row += &x.row(i);
            }
            row /= members.len() as f64;
        }
        self.push(v, Op::GroupMean(a, groups))
    }

    /// Pairwise cosine similarities between the rows of `a` and of `b`.
    /// Pairs involving a zero row have similarity 0 and no gradient.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let (nx, ny) = (row_norms(x), row_norms(y));
        let mut v = x.dot(&y.t());
        for ((i, j), s) in v.indexed_iter_mut() {
            let den = nx[i] * ny[j];
            *s = if den == 0.0 { 0.0 } else { *s / den };
        }
        self.push(v, Op::CosineMatrix(a, b))
    }

    /// `-(1/n) Σ_i Σ_c t_ic log clamp(p_ic)`.
    pub fn cross_entropy(&mut self, probs: Var, targets: Array2<f64>) -> Var {
        let p = self.value(probs);
        assert_eq!(p.dim(), targets.dim());
        let n = p.nrows() as f64;
        let total: f64 = p
            .iter()
            .zip(targets.iter())
            .filter(|(_, &t)| t != 0.0)
            .map(|(&pi, &t)| -t * clamp_prob(pi).0.ln())
            .sum();
        self.push(Array2::from_elem((1, 1), total / n), Op::CrossEntropy(probs, targets))
    }

    /// Mean over masked rows of `KL(targets_i || probs_i)`; 0 with no masked rows.
    pub fn masked_kl(&mut self, probs: Var, targets: Array2<f64>, mask: Vec<bool>) -> Var {
        let p = self.value(probs);
        assert_eq!(p.dim(), targets.dim());
        let count = mask.iter().filter(|&&m| m).count();
        let mut total = 0.0;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (&pi, &yi) in p.row(i).iter().zip(targets.row(i)) {
                if yi > 0.0 {
                    total += yi * (yi / clamp_prob(pi).0).ln();
                }
            }
        }
        let v = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(Array2::from_elem((1, 1), v), Op::MaskedKl(probs, targets, mask))
    }

    /// `-Σ_i log softmax(logits_i)[labels_i]` (summed, not averaged).
    pub fn log_softmax_nll(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let x = self.value(logits);
        let mut total = 0.0;
        for (row, &y) in x.rows().into_iter().zip(&labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        self.push(Array2::from_elem((1, 1), total), Op::LogSoftmaxNll(logits, labels))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.dim()).collect();
        let tracked = self.tracked();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        if tracked[loss.0] {
            grads[loss.0] = Some(Array2::ones(shapes[loss.0]));
        }

        let acc = |grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>| {
            if !tracked[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::Const => {}
                Op::MatMul(a, b) => {
                    if tracked[a.0] {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if tracked[b.0] {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::SpMM(adj, b) => acc(&mut grads, *b, adj.t_mul_dense(&g)),
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, &g * &mask);
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).nrows();
                    let row = &g / n as f64;
                    acc(&mut grads, *a, row.broadcast((n, g.ncols())).unwrap().to_owned());
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let ga = &g * self.value(*row);
                    let grow = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *row, grow);
                }
                Op::ScaleRows(a, scales) => {
                    let mut ga = g;
                    for (mut r, &s) in ga.rows_mut().into_iter().zip(scales) {
                        r *= s;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Grl(a, beta) => acc(&mut grads, *a, g * -*beta),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for ((gy, yy), mut out) in g.rows().into_iter().zip(y.rows()).zip(ga.rows_mut()) {
                        let dot = gy.dot(&yy);
                        out.assign(&(&yy * &(&gy - dot)));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(shapes[a.0]);
                    for (r, &i) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(i);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GroupMean(a, groups) => {
                    let mut ga = Array2::zeros(shapes[a.0]);
                    for (gi, members) in groups.iter().enumerate() {
                        let share = &g.row(gi) / members.len() as f64;
                        for &i in members {
                            let mut dst = ga.row_mut(i);
                            dst += &share;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::CosineMatrix(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (nx, ny) = (row_norms(x), row_norms(y));
                    let sims = &node.value;
                    let mut gx = Array2::zeros(x.dim());
                    let mut gy = Array2::zeros(y.dim());
                    for i in 0..x.nrows() {
                        for j in 0..y.nrows() {
                            let den = nx[i] * ny[j];
                            let gij = g[[i, j]];
                            if den == 0.0 || gij == 0.0 {
                                continue;
                            }
                            let s = sims[[i, j]];
                            // d s / d x_i = y_j / (|x_i||y_j|) - s x_i / |x_i|^2
                            let cx = gij / den;
                            let sx = gij * s / (nx[i] * nx[i]);
                            let cy = gij / den;
                            let sy = gij * s / (ny[j] * ny[j]);
                            for c in 0..x.ncols() {
                                gx[[i, c]] += cx * y[[j, c]] - sx * x[[i, c]];
                                gy[[j, c]] += cy * x[[i, c]] - sy * y[[j, c]];
                            }
                        }
                    }
                    acc(&mut grads, *a, gx);
                    acc(&mut grads, *b, gy);
                }
                Op::CrossEntropy(p, targets) => {
                    let probs = self.value(*p);
                    let scale = g[[0, 0]] / probs.nrows() as f64;
                    let mut gp = Array2::zeros(probs.dim());
                    for ((idx, &t), &pi) in targets.indexed_iter().zip(probs.iter()) {
                        let (pc, inside) = clamp_prob(pi);
                        if t != 0.0 && inside {
                            gp[idx] = -scale * t / pc;
                        }
                    }
                    acc(&mut grads, *p, gp);
                }
                Op::MaskedKl(p, targets, mask) => {
                    let probs = self.value(*p);
                    let count = mask.iter().filter(|&&m| m).count();
                    let mut gp = Array2::zeros(probs.dim());
                    if count > 0 {
                        let scale = g[[0, 0]] / count as f64;
                        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                            for c in 0..probs.ncols() {
                                let (pc, inside) = clamp_prob(probs[[i, c]]);
                                let y = targets[[i, c]];
                                if y > 0.0 && inside {
                                    gp[[i, c]] = -scale * y / pc;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *p, gp);
                }
                Op::LogSoftmaxNll(x, labels) => {
                    let mut gx = softmax_rows(self.value(*x));
                    for (r, &y) in labels.iter().enumerate() {
                        gx[[r, y]] -= 1.0;
                    }
                    acc(&mut grads, *x, gx * g[[0, 0]]);
                }
            }
        }
        Gradients { grads, shapes }
    }
}
