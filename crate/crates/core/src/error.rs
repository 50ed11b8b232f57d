use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not conform for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Bad input data (negative weights, node ids out of range, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. a non-scalar loss or teacher forcing without targets.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    /// Nothing left to average over (everything masked, no prior seasons).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("insufficient data: need at least {needed} time steps, have {have}")]
    InsufficientData { needed: usize, have: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("checkpoint {path:?}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
