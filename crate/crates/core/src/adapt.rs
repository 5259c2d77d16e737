//! Few-shot transfer to an unseen domain through a learned prompt.
//!
//! The prompt is a weighted sum of the source domain centers; it rescales
//! every target feature column before the frozen encoder runs. Only the `K`
//! weights are trained, against a cosine prototype loss on the support set.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::align::{AlignedFeatures, DomainCenter};
use crate::config::{RunConfig, TaskMode};
use crate::error::{Error, Result};
use crate::graph::{extract_ego, DomainGraph};
use crate::nn::checkpoint::encoder_hash;
use crate::nn::model::{gcn_on_tape, EncoderParams, EncoderVars, GraphInput};
use crate::nn::{AdamConfig, AdamState, GraphAdjacency, Tape, Var};
use crate::seed::{self, Rng};

/// The only trainable parameters during adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptWeights {
    pub alpha: Vec<f64>,
}

impl PromptWeights {
    /// `1/K` for every source domain.
    pub fn uniform(k: usize) -> Self {
        Self {
            alpha: vec![1.0 / k as f64; k],
        }
    }

    pub fn num_params(&self) -> usize {
        self.alpha.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotTask {
    pub shots: usize,
    /// `(node, class)`, grouped by class.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<usize>,
    pub num_classes: usize,
    pub mode: TaskMode,
}

impl FewShotTask {
    pub fn support_nodes(&self) -> Vec<usize> {
        self.support.iter().map(|&(n, _)| n).collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|&(_, c)| c).collect()
    }
}

/// Draws `shots` support nodes per class; every other node is a query.
pub fn sample_task(labels: &[usize], shots: usize, mode: TaskMode, rng: &mut Rng) -> Result<FewShotTask> {
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    if num_classes == 0 {
        return Err(Error::Validation("target has no labeled nodes".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut support = Vec::with_capacity(shots * num_classes);
    let mut in_support = vec![false; labels.len()];
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < shots {
            return Err(Error::Validation(format!(
                "class {c} has {} nodes, fewer than shots = {shots}",
                members.len()
            )));
        }
        for &n in members.choose_multiple(rng, shots) {
            support.push((n, c));
            in_support[n] = true;
        }
    }
    let query = (0..labels.len()).filter(|&i| !in_support[i]).collect();
    Ok(FewShotTask {
        shots,
        support,
        query,
        num_classes,
        mode,
    })
}

/// `sum_i alpha_i c_i`.
pub fn mixed_prompt(alpha: &[f64], centers: &[DomainCenter]) -> Result<Vec<f64>> {
    if alpha.len() != centers.len() || centers.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} prompt weights for {} centers",
            alpha.len(),
            centers.len()
        )));
    }
    let d = centers[0].vector.len();
    let mut out = vec![0.0; d];
    for (a, c) in alpha.iter().zip(centers) {
        if c.vector.len() != d {
            return Err(Error::DimensionMismatch("centers differ in width".into()));
        }
        for (o, v) in out.iter_mut().zip(&c.vector) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Multiplies every row of `x` elementwise by `p`.
pub fn apply_prompt(x: &Array2<f64>, p: &[f64]) -> Result<Array2<f64>> {
    if x.ncols() != p.len() {
        return Err(Error::DimensionMismatch(format!(
            "prompt of width {} for features of width {}",
            p.len(),
            x.ncols()
        )));
    }
    let row = ndarray::ArrayView1::from(p);
    Ok(x * &row)
}

/// Per-class mean embeddings, `C x h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub vectors: Array2<f64>,
}

fn class_groups(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        groups
            .get_mut(c)
            .ok_or_else(|| Error::Index(format!("label {c} with {num_classes} classes")))?
            .push(i);
    }
    if let Some(c) = groups.iter().position(Vec::is_empty) {
        return Err(Error::Validation(format!("class {c} has no support items")));
    }
    Ok(groups)
}

pub fn compute_prototypes(embeddings: &Array2<f64>, labels: &[usize], num_classes: usize) -> Result<Prototypes> {
    let groups = class_groups(labels, num_classes)?;
    let mut vectors = Array2::zeros((num_classes, embeddings.ncols()));
    for (c, members) in groups.iter().enumerate() {
        let mean = embeddings.select(Axis(0), members).mean_axis(Axis(0)).expect("non-empty class");
        vectors.row_mut(c).assign(&mean);
    }
    Ok(Prototypes { vectors })
}

/// Summed negative log-likelihood of cosine-to-prototype logits over `tau`.
pub fn loss_downstream(embeddings: &Array2<f64>, labels: &[usize], prototypes: &Prototypes, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let h = tape.constant(embeddings.clone());
    let p = tape.constant(prototypes.vectors.clone());
    let sims = tape.cosine_matrix(h, p);
    let logits = tape.scale(sims, 1.0 / tau);
    let loss = tape.log_softmax_nll(logits, labels.to_vec());
    tape.scalar(loss)
}

/// Nearest prototype by cosine similarity.
pub fn predict(embeddings: &Array2<f64>, prototypes: &Prototypes) -> Vec<usize> {
    let mut tape = Tape::new();
    let h = tape.constant(embeddings.clone());
    let p = tape.constant(prototypes.vectors.clone());
    let sims = tape.cosine_matrix(h, p);
    tape.value(sims)
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &s)| if s > best.1 { (c, s) } else { best })
                .0
        })
        .collect()
}

/// A target domain prepared for repeated prompted encoding.
pub struct TargetView<'a> {
    graph: &'a DomainGraph,
    mode: TaskMode,
    adjacency: GraphAdjacency<'a>,
    /// `A~ X` over the whole target graph (node mode).
    propagated: Array2<f64>,
    /// One ego subgraph per node (graph mode).
    egos: Vec<GraphInput>,
}

impl<'a> TargetView<'a> {
    pub fn new(graph: &'a DomainGraph, aligned: &'a AlignedFeatures, mode: TaskMode, hops: usize) -> Result<Self> {
        if aligned.num_nodes() != graph.num_nodes() {
            return Err(Error::DimensionMismatch(format!(
                "{} aligned rows for {} target nodes",
                aligned.num_nodes(),
                graph.num_nodes()
            )));
        }
        let adjacency = GraphAdjacency::new(graph);
        let (propagated, egos) = match mode {
            TaskMode::Node => (adjacency.full().mul_dense(&aligned.matrix), Vec::new()),
            TaskMode::Graph => {
                let egos = (0..graph.num_nodes())
                    .map(|c| extract_ego(graph, c, hops, aligned).map(|e| GraphInput::from(&e)))
                    .collect::<Result<Vec<_>>>()?;
                (Array2::zeros((0, aligned.dim())), egos)
            }
        };
        Ok(Self {
            graph,
            mode,
            adjacency,
            propagated,
            egos,
        })
    }

    pub fn graph(&self) -> &DomainGraph {
        self.graph
    }

    pub fn mode(&self) -> TaskMode {
        self.mode
    }

    /// Records prompted embeddings of `nodes` (one row each, in order).
    ///
    /// In node mode only the two-hop receptive field of `nodes` is touched;
    /// the rows equal those of the GCN run on the whole target graph.
    pub fn record(&self, tape: &mut Tape, enc: EncoderVars, prompt: Var, nodes: &[usize]) -> Var {
        match self.mode {
            TaskMode::Node => {
                let mut uniq = nodes.to_vec();
                uniq.sort_unstable();
                uniq.dedup();
                let field = self.adjacency.expand(&uniq);
                let x = tape.constant(self.propagated.select(Axis(0), &field));
                let x = tape.mul_row(x, prompt);
                let z = tape.matmul(x, enc.w1);
                let h1 = tape.relu(z);
                let a = tape.spmm(Rc::new(self.adjacency.block(nodes, &field)), h1);
                tape.matmul(a, enc.w2)
            }
            TaskMode::Graph => {
                let pooled: Vec<Var> = nodes
                    .iter()
                    .map(|&n| {
                        let ego = &self.egos[n];
                        let x = tape.constant(ego.features.clone());
                        let x = tape.mul_row(x, prompt);
                        let h = gcn_on_tape(tape, &ego.adj, x, enc);
                        tape.mean_rows(h)
                    })
                    .collect();
                tape.concat_rows(&pooled)
            }
        }
    }

    /// Prompted embeddings without gradients.
    pub fn embed(&self, enc: &EncoderParams, alpha: &[f64], centers: &[DomainCenter], nodes: &[usize]) -> Result<Array2<f64>> {
        let p = mixed_prompt(alpha, centers)?;
        let mut tape = Tape::new();
        let vars = EncoderVars::frozen(&mut tape, enc);
        let prompt = tape.constant(Array2::from_shape_vec((1, p.len()), p).expect("row"));
        let out = self.record(&mut tape, vars, prompt, nodes);
        Ok(tape.value(out).clone())
    }
}

fn centers_matrix(centers: &[DomainCenter]) -> Array2<f64> {
    let d = centers.first().map_or(0, |c| c.vector.len());
    Array2::from_shape_fn((centers.len(), d), |(k, j)| centers[k].vector[j])
}

/// Support loss and its gradient with respect to `alpha`.
pub fn support_loss_and_grad(
    view: &TargetView<'_>,
    enc: &EncoderParams,
    centers: &[DomainCenter],
    task: &FewShotTask,
    alpha: &[f64],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if alpha.len() != centers.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} prompt weights for {} centers",
            alpha.len(),
            centers.len()
        )));
    }
    let labels = task.support_labels();
    let groups = class_groups(&labels, task.num_classes)?;
    let mut tape = Tape::new();
    let vars = EncoderVars::frozen(&mut tape, enc);
    let a = tape.leaf(Array2::from_shape_vec((1, alpha.len()), alpha.to_vec()).expect("row"));
    let c = tape.constant(centers_matrix(centers));
    let prompt = tape.matmul(a, c);
    let h = view.record(&mut tape, vars, prompt, &task.support_nodes());
    let protos = tape.group_mean(h, groups);
    let sims = tape.cosine_matrix(h, protos);
    let logits = tape.scale(sims, 1.0 / tau);
    let loss = tape.log_softmax_nll(logits, labels);
    let grads = tape.backward(loss);
    Ok((tape.scalar(loss), grads.get(a).row(0).to_vec()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub prompt: PromptWeights,
    /// Support loss before each update.
    pub losses: Vec<f64>,
}

/// Trains the prompt weights with Adam; the encoder is only read.
pub fn adapt(
    view: &TargetView<'_>,
    enc: &EncoderParams,
    centers: &[DomainCenter],
    task: &FewShotTask,
    cfg: &RunConfig,
) -> Result<Adapted> {
    let before = encoder_hash(enc);
    let prompt = PromptWeights::uniform(centers.len());
    let mut alpha = Array2::from_shape_vec((1, prompt.num_params()), prompt.alpha).expect("row");
    let mut adam = AdamState::new(AdamConfig::new(cfg.lr_down, 0.0), [&alpha]);
    let mut losses = Vec::with_capacity(cfg.steps_adapt);
    for _ in 0..cfg.steps_adapt {
        let (loss, grad) = support_loss_and_grad(view, enc, centers, task, alpha.row(0).as_slice().expect("contiguous"), cfg.tau)?;
        losses.push(loss);
        let grad = Array2::from_shape_vec((1, grad.len()), grad).expect("row");
        adam.step(&["prompt.alpha"], &mut [&mut alpha], &[grad])?;
    }
    assert_eq!(before, encoder_hash(enc), "encoder changed during adaptation");
    Ok(Adapted {
        prompt: PromptWeights {
            alpha: alpha.row(0).to_vec(),
        },
        losses,
    })
}

/// Query accuracy with prototypes built from the support set.
pub fn evaluate(
    view: &TargetView<'_>,
    enc: &EncoderParams,
    centers: &[DomainCenter],
    task: &FewShotTask,
    prompt: &PromptWeights,
) -> Result<f64> {
    let labels = view
        .graph
        .labels
        .as_ref()
        .ok_or_else(|| Error::Validation("target graph has no labels".into()))?;
    let support = task.support_nodes();
    let emb_s = view.embed(enc, &prompt.alpha, centers, &support)?;
    let protos = compute_prototypes(&emb_s, &task.support_labels(), task.num_classes)?;
    if task.query.is_empty() {
        return Ok(1.0);
    }
    let emb_q = view.embed(enc, &prompt.alpha, centers, &task.query)?;
    let pred = predict(&emb_q, &protos);
    let correct = pred.iter().zip(&task.query).filter(|(&p, &q)| p == labels[q]).count();
    Ok(correct as f64 / task.query.len() as f64)
}

/// One line of the metrics output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub target: usize,
    pub shots: usize,
    pub mode: TaskMode,
    pub seed: u64,
    pub accuracy: f64,
}

/// The few-shot task of repeat `r`, with the seed it was drawn from.
pub fn repeat_task(labels: &[usize], cfg: &RunConfig, mode: TaskMode, r: u64) -> Result<(u64, FewShotTask)> {
    let task_seed = seed::derive_indexed(cfg.seed, "task", r);
    let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(task_seed);
    Ok((task_seed, sample_task(labels, cfg.shots, mode, &mut rng)?))
}

/// `repeats` independent label samplings, each adapted and evaluated.
pub fn run_repeats(
    view: &TargetView<'_>,
    enc: &EncoderParams,
    centers: &[DomainCenter],
    cfg: &RunConfig,
) -> Result<Vec<EvalRecord>> {
    let labels = view
        .graph
        .labels
        .as_ref()
        .ok_or_else(|| Error::Validation("target graph has no labels".into()))?;
    (0..cfg.repeats as u64)
        .map(|r| {
            let (task_seed, task) = repeat_task(labels, cfg, view.mode, r)?;
            let adapted = adapt(view, enc, centers, &task, cfg)?;
            let accuracy = evaluate(view, enc, centers, &task, &adapted.prompt)?;
            Ok(EvalRecord {
                target: view.graph.domain_id,
                shots: cfg.shots,
                mode: view.mode,
                seed: task_seed,
                accuracy,
            })
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn center(id: usize, v: &[f64]) -> DomainCenter {
        DomainCenter { domain_id: id, vector: v.to_vec() }
    }

    #[test]
    fn prompt_cases() {
        let cs = [center(0, &[1.0, 2.0]), center(1, &[-3.0, 0.5])];
        assert_eq!(mixed_prompt(&[1.0, 0.0], &cs).unwrap(), vec![1.0, 2.0]);
        assert_eq!(mixed_prompt(&[0.0, 0.0], &cs).unwrap(), vec![0.0, 0.0]);
        assert!(mixed_prompt(&[1.0], &cs).is_err());
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(apply_prompt(&x, &[1.0, 1.0]).unwrap(), x);
        assert_eq!(apply_prompt(&x, &[2.0, 0.0]).unwrap(), array![[2.0, 0.0], [6.0, 0.0]]);
    }

    #[test]
    fn prototype_loss_closed_forms() {
        let h = array![[1.0, 0.0]];
        let one = Prototypes { vectors: array![[2.0, 0.5]] };
        assert_eq!(loss_downstream(&h, &[0], &one, 1.0), 0.0);
        let two = Prototypes { vectors: array![[1.0, 0.0], [-1.0, 0.0]] };
        let expect = -(1f64.exp() / (1f64.exp() + (-1f64).exp())).ln();
        assert!((loss_downstream(&h, &[0], &two, 1.0) - expect).abs() < 1e-12);
        assert!((expect - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn task_sampling() {
        let labels = [0, 0, 1, 1, 1, 2, 2];
        let mut rng = seed::rng(5, "t");
        let t = sample_task(&labels, 2, TaskMode::Node, &mut rng).unwrap();
        assert_eq!(t.support.len(), 6);
        assert_eq!(t.num_classes, 3);
        for &(n, c) in &t.support {
            assert_eq!(labels[n], c);
            assert!(!t.query.contains(&n));
        }
        assert_eq!(t.query.len(), 1);
        assert!(sample_task(&labels, 3, TaskMode::Node, &mut rng).is_err());
    }
}
