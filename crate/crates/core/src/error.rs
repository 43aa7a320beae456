use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum HqaError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    Argument { op: &'static str, detail: String },

    #[error("index {index} out of range for codebook of size {size}")]
    Range { index: usize, size: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation refused: {0}")]
    Gate(String),

    /// A step budget ran out; state up to `step` (exclusive) is saved.
    #[error("training paused at layer {layer} after {step} steps")]
    Paused { layer: usize, step: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = HqaError> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> HqaError {
    HqaError::Dimension {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> HqaError {
    HqaError::Argument {
        op,
        detail: detail.into(),
    }
}
