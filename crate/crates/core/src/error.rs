//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimensions are incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// A text dataset could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A dataset is structurally inconsistent (dimension counts, labels).
    #[error("data error: {0}")]
    Data(String),

    /// A lookup exceeded a fixed capacity (e.g. positional table length).
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Training produced a non-finite loss.
    #[error("divergence at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    /// A checkpoint file is malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
