use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by tensor operations and the autodiff graph.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Errors raised by the complex channel algebra.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("negative variance {0}")]
    NegativeVariance(f64),
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("odd bridge width {0}")]
    OddWidth(usize),
}

/// Crate-level error covering training, evaluation and I/O paths.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step} of {stage}: loss {loss}")]
    Divergence {
        stage: String,
        step: usize,
        loss: f64,
    },
    #[error("missing resource: {0}")]
    Missing(String),
    #[error("checkpoint config hash mismatch (expected {expected}, found {found}); pass --force to load anyway")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("cannot ingest {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
