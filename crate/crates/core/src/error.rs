use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} {lhs_shape:?} vs {rhs} {rhs_shape:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        lhs_shape: [usize; 2],
        rhs: String,
        rhs_shape: [usize; 2],
    },

    #[error("non-finite value produced by {op} at {node}")]
    NonFinite { op: &'static str, node: String },

    #[error("zero-norm vector in cosine similarity: {operand} row {row}")]
    ZeroNorm { operand: String, row: usize },

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("unknown business id {0}")]
    UnknownBusiness(u16),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
