//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the symface pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A detected landmark set carries non-finite coordinates.
    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(String),

    /// A split column would leave one half empty.
    #[error("degenerate split: column {column} is outside [1, {max}] for width {width}")]
    DegenerateSplit {
        column: i64,
        max: usize,
        width: usize,
    },

    /// A split pair is internally inconsistent and cannot be merged.
    #[error("invalid split pair: {0}")]
    InvalidPair(String),

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An input left the mathematical domain of an operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric guard tripped (e.g. normalizing a zero-norm row).
    #[error("numeric guard: {0}")]
    NumericGuard(String),

    /// Invalid run or model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset or manifest problem.
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    /// Evaluation protocol violation (unbalanced folds, degenerate pairs, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
