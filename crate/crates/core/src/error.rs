use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SlabError>;

#[derive(Debug, Error)]
pub enum SlabError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("reduction over an empty set of elements")]
    EmptyReduction,

    #[error("invalid depthwise kernel: {0}")]
    InvalidKernel(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("batch statistics need at least 2 elements per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("token grid {height}x{width} does not hold {tokens} tokens")]
    GridMismatch {
        height: usize,
        width: usize,
        tokens: usize,
    },

    #[error("data stream produced no batches")]
    EmptyStream,

    #[error("model has not converged to a pure BatchNorm form (gamma = {gamma})")]
    NotConverged { gamma: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot fuse: {0}")]
    Unfusable(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("scaling fit needs at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("latency samples must be positive, got {0}")]
    NonPositiveLatency(f64),

    #[error("loss became non-finite at step {step}")]
    DivergedLoss { step: usize },

    #[error("config error in [{section}]: {message}")]
    Config { section: String, message: String },

    #[error("invalid data: {0}")]
    Data(String),
}

impl SlabError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SlabError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SlabError::Io {
            path: path.into(),
            source,
        }
    }
}
