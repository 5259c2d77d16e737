//! Multi-domain graph pre-training with boundary-aware subgraph mixing.
//!
//! Source graphs are aligned into a shared feature space, nodes near the
//! frontier between domain centers are selected, their ego subgraphs are
//! mixed, and a GCN encoder is trained to tell inter-domain mixes apart and
//! recover their domain proportions. A frozen encoder is then adapted to an
//! unseen domain with a small learned prompt.

pub mod adapt;
pub mod align;
pub mod boundary;
pub mod config;
pub mod diag;
pub mod error;
pub mod formats;
pub mod graph;
pub mod mix;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod seed;
pub mod synth;

pub use config::{RunConfig, SynthSpec};
pub use error::{Error, Result};
