use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("insufficient metadata: {0}")]
    InsufficientMetadata(String),

    #[error("cross-environment insert: buffer holds `{buffer}`, frame belongs to `{frame}`")]
    CrossEnvironmentInsert { buffer: String, frame: String },

    #[error("undefined recall: no true loop pairs")]
    UndefinedRecall,

    #[error("stream not sequential: {0}")]
    StreamNotSequential(String),

    #[error("non-finite value in `{layer}`")]
    NonFinite { layer: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("manifest error at `{path}`: {message}")]
    Manifest { path: String, message: String },

    #[error("cannot read frame {frame}: {message}")]
    FrameRead { frame: String, message: String },

    #[error("corrupt container {path:?}: {message}")]
    Corrupt {
        path: Option<PathBuf>,
        message: String,
    },

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn manifest(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Manifest {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn corrupt(message: impl Into<String>) -> Self {
        Error::Corrupt {
            path: None,
            message: message.into(),
        }
    }
}
