use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the pipeline.
///
/// [`Error::is_validation`] separates bad input (files, flags, config values)
/// from failures that happen while running a stage.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid value: {0}")]
    Validation(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("empty graph: {0}")]
    EmptyGraph(String),
    #[error("no mixable cross-domain boundary pairs with similarity > {gamma}; try a lower gamma")]
    NoMixablePairs { gamma: f64 },
    #[error("domain {domain}: pool of {pool} nodes cannot supply {requested} distinct pairs")]
    PoolTooSmall {
        domain: usize,
        pool: usize,
        requested: usize,
    },
    #[error("non-finite gradient at step {step} in parameter `{param}`")]
    NonFiniteGradient { step: u64, param: String },
    #[error("power iteration did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("dropping fraction {fraction} empties domain {domain}")]
    DomainEmptied { fraction: f64, domain: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::DimensionMismatch(_)
                | Error::Validation(_)
                | Error::Index(_)
                | Error::Usage(_)
                | Error::EmptyGraph(_)
                | Error::Io { .. }
                | Error::Json(_)
        )
    }
}
