//! The pre-training network: a bias-free two-layer GCN encoder with mean
//! pooling, a linear intra/inter discriminator, and a domain decomposer fed
//! through a gradient reversal layer.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng as _;

use super::sparse::{normalized_adjacency, SparseMatrix};
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::EgoSubgraph;
use crate::mix::{MixBatch, MixedSubgraph};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `d x h`
    pub w1: Array2<f64>,
    /// `h x h`
    pub w2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    /// `h x 2`; column 0 is intra, column 1 is inter.
    pub w: Array2<f64>,
    /// `1 x 2`
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposerParams {
    /// `h x K`
    pub w: Array2<f64>,
    /// `1 x K`
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub discriminator: DiscriminatorParams,
    pub decomposer: DecomposerParams,
}

pub const PARAM_NAMES: [&str; 6] = [
    "encoder.w1",
    "encoder.w2",
    "discriminator.w",
    "discriminator.b",
    "decomposer.w",
    "decomposer.b",
];

fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(d: usize, hidden: usize, num_domains: usize, rng: &mut Rng) -> Self {
        Self {
            encoder: EncoderParams {
                w1: glorot(d, hidden, rng),
                w2: glorot(hidden, hidden, rng),
            },
            discriminator: DiscriminatorParams {
                w: glorot(hidden, 2, rng),
                b: Array2::zeros((1, 2)),
            },
            decomposer: DecomposerParams {
                w: glorot(hidden, num_domains, rng),
                b: Array2::zeros((1, num_domains)),
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.encoder.w2.ncols()
    }

    pub fn num_domains(&self) -> usize {
        self.decomposer.w.ncols()
    }

    /// Parameters in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Array2<f64>; 6] {
        [
            &self.encoder.w1,
            &self.encoder.w2,
            &self.discriminator.w,
            &self.discriminator.b,
            &self.decomposer.w,
            &self.decomposer.b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 6] {
        [
            &mut self.encoder.w1,
            &mut self.encoder.w2,
            &mut self.discriminator.w,
            &mut self.discriminator.b,
            &mut self.decomposer.w,
            &mut self.decomposer.b,
        ]
    }

    /// Rounds every parameter through `f32`, matching what a checkpoint
    /// stores.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

/// A graph ready for the encoder: normalized adjacency plus features.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub adj: Rc<SparseMatrix>,
    pub features: Array2<f64>,
}

impl GraphInput {
    pub fn new(num_nodes: usize, edges: &[(usize, usize)], features: Array2<f64>) -> Self {
        debug_assert_eq!(features.nrows(), num_nodes);
        Self {
            adj: Rc::new(normalized_adjacency(num_nodes, edges)),
            features,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }
}

impl From<&MixedSubgraph> for GraphInput {
    fn from(m: &MixedSubgraph) -> Self {
        GraphInput::new(m.num_nodes, &m.edges, m.features.clone())
    }
}

impl From<&EgoSubgraph> for GraphInput {
    fn from(e: &EgoSubgraph) -> Self {
        GraphInput::new(e.num_nodes(), &e.edges_local, e.features.clone())
    }
}

fn check_width(input: &GraphInput, enc: &EncoderParams) -> Result<()> {
    if input.features.ncols() != enc.w1.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "encoder expects {} input features, graph has {}",
            enc.w1.nrows(),
            input.features.ncols()
        )));
    }
    Ok(())
}

/// Leaves holding the encoder weights on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub w1: Var,
    pub w2: Var,
}

impl EncoderVars {
    pub fn record(tape: &mut Tape, enc: &EncoderParams) -> Self {
        Self {
            w1: tape.leaf(enc.w1.clone()),
            w2: tape.leaf(enc.w2.clone()),
        }
    }

    /// Frozen weights: recorded as constants, so no gradient reaches them.
    pub fn frozen(tape: &mut Tape, enc: &EncoderParams) -> Self {
        Self {
            w1: tape.constant(enc.w1.clone()),
            w2: tape.constant(enc.w2.clone()),
        }
    }
}

/// `A~ ReLU(A~ X W1) W2` on the tape, with `x` already recorded.
pub fn gcn_on_tape(tape: &mut Tape, adj: &Rc<SparseMatrix>, x: Var, enc: EncoderVars) -> Var {
    let xw = tape.matmul(x, enc.w1);
    let z1 = tape.spmm(Rc::clone(adj), xw);
    let h1 = tape.relu(z1);
    let hw = tape.matmul(h1, enc.w2);
    tape.spmm(Rc::clone(adj), hw)
}

/// Node embeddings without recording gradients.
pub fn gcn_encode(input: &GraphInput, enc: &EncoderParams) -> Result<Array2<f64>> {
    check_width(input, enc)?;
    let h1 = input
        .adj
        .mul_dense(&input.features.dot(&enc.w1))
        .mapv(|v| v.max(0.0));
    Ok(input.adj.mul_dense(&h1.dot(&enc.w2)))
}

/// Mean over node embeddings.
pub fn mean_pool(embeddings: &Array2<f64>) -> Vec<f64> {
    embeddings
        .mean_axis(ndarray::Axis(0))
        .expect("at least one node")
        .to_vec()
}

/// Pooled graph representation.
pub fn graph_embedding(input: &GraphInput, enc: &EncoderParams) -> Result<Vec<f64>> {
    Ok(mean_pool(&gcn_encode(input, enc)?))
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
}

/// `softmax(W^T h + b)` over `{intra, inter}`.
pub fn discriminate(h: &[f64], params: &DiscriminatorParams) -> [f64; 2] {
    let mut tape = Tape::new();
    let x = tape.leaf(row(h));
    let w = tape.leaf(params.w.clone());
    let b = tape.leaf(params.b.clone());
    let logits = tape.matmul(x, w);
    let logits = tape.add_row(logits, b);
    let p = tape.softmax_rows(logits);
    let v = tape.value(p);
    [v[[0, 0]], v[[0, 1]]]
}

/// `m = 1` iff the inter probability strictly exceeds one half.
pub fn gate_mask(probs: &[[f64; 2]]) -> Vec<bool> {
    probs.iter().map(|p| p[1] > 0.5).collect()
}

/// Domain-composition prediction for a (gated) representation.
pub fn decompose(h: &[f64], gate: bool, params: &DecomposerParams) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(row(h));
    let gated = tape.scale_rows(x, vec![if gate { 1.0 } else { 0.0 }]);
    let r = tape.grl(gated, 1.0);
    let w = tape.leaf(params.w.clone());
    let b = tape.leaf(params.b.clone());
    let logits = tape.matmul(r, w);
    let logits = tape.add_row(logits, b);
    let p = tape.softmax_rows(logits);
    tape.value(p).row(0).to_vec()
}

/// Mean binary cross-entropy of `(p_intra, p_inter)` rows against coarse labels.
pub fn loss_dis(probs: &[[f64; 2]], labels: &[u8]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    let mut tape = Tape::new();
    let p = tape.leaf(Array2::from_shape_fn((probs.len(), 2), |(i, c)| probs[i][c]));
    let loss = tape.cross_entropy(p, coarse_targets(labels));
    tape.scalar(loss)
}

/// Mean KL over gated rows.
pub fn loss_fine(predictions: &Array2<f64>, targets: &Array2<f64>, mask: &[bool]) -> f64 {
    let mut tape = Tape::new();
    let p = tape.leaf(predictions.clone());
    let loss = tape.masked_kl(p, targets.clone(), mask.to_vec());
    tape.scalar(loss)
}

fn coarse_targets(labels: &[u8]) -> Array2<f64> {
    Array2::from_shape_fn((labels.len(), 2), |(i, c)| {
        if (c == 1) == (labels[i] == 1) {
            1.0
        } else {
            0.0
        }
    })
}

/// Everything produced by one evaluation of the pre-training objective.
#[derive(Debug)]
pub struct PretrainOutput {
    pub loss: f64,
    pub loss_dis: f64,
    pub loss_fine: f64,
    pub probs: Vec<[f64; 2]>,
    pub gate: Vec<bool>,
    pub coarse_labels: Vec<u8>,
    /// Gradients in [`PARAM_NAMES`] order.
    pub grads: Vec<Array2<f64>>,
}

impl PretrainOutput {
    pub fn gate_fraction(&self) -> f64 {
        self.gate.iter().filter(|&&g| g).count() as f64 / self.gate.len().max(1) as f64
    }

    /// Fraction of inter-domain subgraphs that passed the gate.
    pub fn inter_gate_fraction(&self) -> f64 {
        let (hit, total) = self
            .gate
            .iter()
            .zip(&self.coarse_labels)
            .filter(|(_, &l)| l == 1)
            .fold((0, 0), |(h, t), (&g, _)| (h + usize::from(g), t + 1));
        hit as f64 / total.max(1) as f64
    }
}

/// Handles into a recorded pre-training objective.
#[derive(Debug, Clone)]
pub struct PretrainVars {
    pub loss: Var,
    pub loss_dis: Var,
    pub loss_fine: Var,
    /// Parameter leaves in [`PARAM_NAMES`] order.
    pub params: [Var; 6],
    /// `B x h` pooled representations.
    pub reps: Var,
    pub probs: Var,
    pub gate: Vec<bool>,
}

/// Records the whole objective on `tape`.
pub fn record_pretrain(
    tape: &mut Tape,
    params: &ModelParams,
    inputs: &[GraphInput],
    mix_labels: &Array2<f64>,
    coarse_labels: &[u8],
    grl_beta: f64,
) -> Result<PretrainVars> {
    let enc = EncoderVars::record(tape, &params.encoder);
    let dw = tape.leaf(params.discriminator.w.clone());
    let db = tape.leaf(params.discriminator.b.clone());
    let qw = tape.leaf(params.decomposer.w.clone());
    let qb = tape.leaf(params.decomposer.b.clone());

    let mut pooled = Vec::with_capacity(inputs.len());
    for input in inputs {
        check_width(input, &params.encoder)?;
        let x = tape.leaf(input.features.clone());
        let h = gcn_on_tape(tape, &input.adj, x, enc);
        pooled.push(tape.mean_rows(h));
    }
    let reps = tape.concat_rows(&pooled);

    let logits = tape.matmul(reps, dw);
    let logits = tape.add_row(logits, db);
    let probs = tape.softmax_rows(logits);
    let loss_dis = tape.cross_entropy(probs, coarse_targets(coarse_labels));

    let gate: Vec<bool> = tape.value(probs).rows().into_iter().map(|r| r[1] > 0.5).collect();
    let gated = tape.scale_rows(reps, gate.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect());
    let reversed = tape.grl(gated, grl_beta);
    let qlogits = tape.matmul(reversed, qw);
    let qlogits = tape.add_row(qlogits, qb);
    let comp = tape.softmax_rows(qlogits);
    let loss_fine = tape.masked_kl(comp, mix_labels.clone(), gate.clone());

    let loss = tape.add(loss_dis, loss_fine);
    Ok(PretrainVars {
        loss,
        loss_dis,
        loss_fine,
        params: [enc.w1, enc.w2, dw, db, qw, qb],
        reps,
        probs,
        gate,
    })
}

pub fn batch_tensors(batch: &MixBatch, num_domains: usize) -> Result<(Vec<GraphInput>, Array2<f64>, Vec<u8>)> {
    if batch.is_empty() {
        return Err(Error::Validation("pre-training batch is empty".into()));
    }
    let subs: Vec<&MixedSubgraph> = batch.iter().collect();
    for s in &subs {
        if s.mix_label.len() != num_domains {
            return Err(Error::DimensionMismatch(format!(
                "mix label over {} domains, decomposer has {num_domains}",
                s.mix_label.len()
            )));
        }
    }
    let inputs = subs.iter().map(|&s| GraphInput::from(s)).collect();
    let labels = Array2::from_shape_fn((subs.len(), num_domains), |(i, k)| subs[i].mix_label[k]);
    let coarse = subs.iter().map(|s| s.coarse_label).collect();
    Ok((inputs, labels, coarse))
}

/// `L_dis + L_fine` on a batch, with gradients for every parameter.
pub fn loss_pretrain(params: &ModelParams, batch: &MixBatch, grl_beta: f64) -> Result<PretrainOutput> {
    let (inputs, mix_labels, coarse) = batch_tensors(batch, params.num_domains())?;
    let mut tape = Tape::new();
    let vars = record_pretrain(&mut tape, params, &inputs, &mix_labels, &coarse, grl_beta)?;
    let grads: Gradients = tape.backward(vars.loss);
    let probs = tape
        .value(vars.probs)
        .rows()
        .into_iter()
        .map(|r| [r[0], r[1]])
        .collect();
    Ok(PretrainOutput {
        loss: tape.scalar(vars.loss),
        loss_dis: tape.scalar(vars.loss_dis),
        loss_fine: tape.scalar(vars.loss_fine),
        probs,
        gate: vars.gate,
        coarse_labels: coarse,
        grads: vars.params.iter().map(|&v| grads.get(v)).collect(),
    })
}

/// Loss value only (used by finite-difference checks).
pub fn pretrain_loss_value(params: &ModelParams, batch: &MixBatch, grl_beta: f64) -> Result<f64> {
    let (inputs, mix_labels, coarse) = batch_tensors(batch, params.num_domains())?;
    let mut tape = Tape::new();
    let vars = record_pretrain(&mut tape, params, &inputs, &mix_labels, &coarse, grl_beta)?;
    Ok(tape.scalar(vars.loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::array;

    #[test]
    fn isolated_node_encoding() {
        let mut rng = seed::rng(1, "t");
        let p = ModelParams::init(3, 4, 2, &mut rng);
        let x = array![[0.3, -1.0, 2.0]];
        let input = GraphInput::new(1, &[], x.clone());
        let out = gcn_encode(&input, &p.encoder).unwrap();
        let expect = x.dot(&p.encoder.w1).mapv(|v| v.max(0.0)).dot(&p.encoder.w2);
        assert!((out - expect).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn zero_features_zero_output() {
        let p = ModelParams::init(3, 4, 2, &mut seed::rng(2, "t"));
        let input = GraphInput::new(3, &[(0, 1), (1, 2)], Array2::zeros((3, 3)));
        assert!(gcn_encode(&input, &p.encoder).unwrap().iter().all(|&v| v == 0.0));
        let bad = GraphInput::new(1, &[], Array2::zeros((1, 5)));
        assert!(matches!(gcn_encode(&bad, &p.encoder), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn pooling() {
        assert_eq!(mean_pool(&array![[1.0, 2.0]]), vec![1.0, 2.0]);
        assert_eq!(mean_pool(&array![[1.0, -2.0], [-1.0, 2.0]]), vec![0.0, 0.0]);
    }

    #[test]
    fn discriminator_closed_forms() {
        let zero = DiscriminatorParams { w: Array2::zeros((2, 2)), b: Array2::zeros((1, 2)) };
        assert_eq!(discriminate(&[0.4, -3.0], &zero), [0.5, 0.5]);
        let biased = DiscriminatorParams { w: Array2::zeros((2, 2)), b: array![[3f64.ln(), 0.0]] };
        let p = discriminate(&[1.0, 1.0], &biased);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gate_is_strict() {
        assert_eq!(gate_mask(&[[0.3, 0.7], [0.7, 0.3], [0.5, 0.5]]), vec![true, false, false]);
    }

    #[test]
    fn decomposer_cases() {
        let zero = DecomposerParams { w: Array2::zeros((2, 3)), b: Array2::zeros((1, 3)) };
        for p in decompose(&[1.0, 2.0], true, &zero) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let q = DecomposerParams { w: array![[5.0, 0.0, 1.0], [2.0, 2.0, 2.0]], b: array![[0.0, 1.0, 2.0]] };
        let masked = decompose(&[1.0, 2.0], false, &q);
        let z: f64 = [0.0f64, 1.0, 2.0].iter().map(|v| v.exp()).sum();
        for (k, p) in masked.iter().enumerate() {
            assert!((p - (k as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_closed_forms() {
        let uniform = vec![[0.5, 0.5]; 4];
        assert!((loss_dis(&uniform, &[0, 1, 1, 0]) - 2f64.ln()).abs() < 1e-15);
        let perfect = vec![[1.0, 0.0], [0.0, 1.0]];
        assert!(loss_dis(&perfect, &[0, 1]) <= 1e-10);

        let y = array![[0.5, 0.5, 0.0]];
        assert_eq!(loss_fine(&y, &y, &[true]), 0.0);
        let u = Array2::from_elem((1, 3), 1.0 / 3.0);
        assert!((loss_fine(&u, &y, &[true]) - 1.5f64.ln()).abs() < 1e-12);
        assert_eq!(loss_fine(&u, &y, &[false]), 0.0);
    }
}
