use thiserror::Error;

/// Errors produced by tensor math, model evaluation, training and data loading.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("non-finite value in {op} at flat index {index} (checked mode)")]
    Numeric { op: &'static str, index: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("tensor belongs to a different tape (expected tape {expected}, found {found})")]
    TapeMismatch { expected: u64, found: u64 },

    #[error("loss tensor is not connected to the active tape")]
    LossNotOnTape,

    #[error("token id {id} out of range (vocab size {vocab}) at position {position}")]
    TokenOutOfRange {
        id: usize,
        vocab: usize,
        position: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("distribution not normalized: {0}")]
    NotNormalized(String),

    #[error("non-finite gradient for parameter `{0}`; optimization step rejected")]
    NonFiniteGradient(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
