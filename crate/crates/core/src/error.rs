use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("transform over {dims} axes requested on a rank-{rank} tensor")]
    DimsExceedRank { dims: usize, rank: usize },

    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("layer `{0}` has no recorded tape; run a train-mode forward before backward")]
    NoTape(String),

    #[error("optimizer has no auxiliary state for parameter `{0}`")]
    MissingOptimizerState(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("label {label} at sample {index} is outside [0, {classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: corrupt at byte offset {offset}: {reason}")]
    Corrupt {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("{path}: truncated at byte offset {offset} (expected {expected} more bytes)")]
    Truncated {
        path: PathBuf,
        offset: u64,
        expected: u64,
    },
}

impl Error {
    pub(crate) fn in_layer(self, layer: &str) -> Self {
        match self {
            // keep the innermost layer name only
            e @ (Error::Layer { .. } | Error::NoTape(_)) => e,
            other => Error::Layer {
                layer: layer.to_string(),
                source: Box::new(other),
            },
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
