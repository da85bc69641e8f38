//! Crate-wide error type.

use std::fmt;

/// Errors surfaced by tensor ops, graph construction, pruning and the pipeline.
#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes; the detail names both shapes.
    ShapeMismatch {
        op: &'static str,
        detail: String,
    },
    /// An operation produced NaN or Inf.
    NonFinite {
        op: String,
    },
    /// Invalid argument to an operation.
    InvalidArg {
        op: &'static str,
        detail: String,
    },
    /// Structurally invalid network graph; names the offending node.
    Graph(String),
    /// Sparsity loss requested on a model without prunable layers.
    NothingToPrune,
    /// `backward` called on a non-scalar loss.
    NonScalarLoss {
        numel: usize,
    },
    /// Training loss became non-finite.
    Diverged {
        epoch: usize,
        batch: usize,
    },
    /// Malformed run configuration.
    Config(String),
    /// Malformed or incompatible checkpoint file.
    Checkpoint(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::InvalidArg { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            Error::Graph(msg) => write!(f, "invalid graph: {msg}"),
            Error::NothingToPrune => write!(f, "nothing to prune: model has no masked layers"),
            Error::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            Error::Diverged { epoch, batch } => {
                write!(f, "training diverged: non-finite loss at epoch {epoch}, batch {batch}")
            }
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
