use std::path::PathBuf;

use crate::media_io::PnmError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Pnm(#[from] PnmError),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image dimensions {width}x{height}: {reason}")]
    Dimensions {
        width: usize,
        height: usize,
        reason: &'static str,
    },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("payload of {requested:.3} bits exceeds capacity of {capacity:.3} bits")]
    PayloadExceedsCapacity { requested: f64, capacity: f64 },

    #[error("cost map has no embeddable pixels")]
    AllWet,

    #[error("shape mismatch at layer {layer}: expected {expected}, got {got:?}")]
    Shape {
        layer: usize,
        expected: String,
        got: Vec<usize>,
    },

    #[error("backward called without a preceding training-mode forward pass")]
    NoForwardState,

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("model is untrained")]
    Untrained,

    #[error(
        "materialized grid cache needs {projected_bytes} bytes but the budget is {budget_bytes}; \
         switch to lazy mode"
    )]
    InsufficientStorage {
        projected_bytes: u64,
        budget_bytes: u64,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("missing prerequisite: {0}")]
    Missing(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
