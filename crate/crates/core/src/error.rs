use thiserror::Error;

use crate::data::DataError;
use crate::persistence::CheckpointError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}: non-finite value")]
    NonFinite(String),

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("degenerate range [{0}, {0}] has no scale")]
    DegenerateRange(f64),

    #[error("quantization already attached to this model")]
    AlreadyQuantized,

    #[error("invalid model: layer {layer}: {reason}")]
    InvalidModel { layer: String, reason: String },

    #[error("group `{0}` has no entry in the bit assignment")]
    MissingGroup(String),

    #[error("unknown accelerator model `{name}` (known: {known})")]
    UnknownAccelerator { name: String, known: String },

    #[error("training diverged at step {step}: non-finite {tensor}")]
    Divergence { step: usize, tensor: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
