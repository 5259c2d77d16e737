//! Differentiable model components and training utilities.

pub mod adam;
pub mod checkpoint;
pub mod model;
pub mod sparse;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use model::{
    decompose, discriminate, gate_mask, gcn_encode, graph_embedding, loss_dis, loss_fine, loss_pretrain,
    mean_pool, DecomposerParams, DiscriminatorParams, EncoderParams, GraphInput, ModelParams, PretrainOutput,
    PARAM_NAMES,
};
pub use sparse::{normalized_adjacency, GraphAdjacency, SparseMatrix};
pub use tape::{Gradients, Tape, Var};
