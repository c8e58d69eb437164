//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement, with the offending op and a shape diagnostic.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A parameter outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Dataset construction or lookup failure.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Training aborted; names the first layer whose gradient went non-finite.
    #[error("non-finite gradient in layer `{layer}` (epoch {epoch}, batch {batch})")]
    NonFiniteGrad {
        layer: String,
        epoch: usize,
        batch: usize,
    },

    /// Checkpoint or dataset file failed validation.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    /// Generalization-protocol hygiene violation (test data seen in training).
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// Lifecycle-management registry or monitoring failure.
    #[error("lcm error: {0}")]
    Lcm(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
