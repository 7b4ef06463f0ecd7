//! Error types shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor operands do not fit together (inner dimensions, ranks, extents).
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A parameter value outside its documented domain.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Class label outside the valid range of the classifier head.
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    /// Autodiff misuse, e.g. backward on an empty tape or a non-scalar root.
    #[error("tape usage error: {0}")]
    Tape(String),

    /// Malformed IDX file; `offset` is the byte position that failed.
    #[error("idx parse error at byte {offset}: {reason}")]
    IdxParse { offset: u64, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Diverged { epoch: u64, step: u64, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
