use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, found {found:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("label {label} at index {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("tape already consumed by a backward pass; run a new forward first")]
    TapeConsumed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("corrupt or unsupported file: {0}")]
    Format(String),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("embedding row {index} has zero norm")]
    ZeroNorm { index: usize },

    #[error("non-finite loss in {stage} at epoch {epoch}, step {step}")]
    NonFinite {
        stage: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
