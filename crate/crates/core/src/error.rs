use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("missing required column {0:?} in metadata header")]
    MissingColumn(String),

    #[error("row {row}: unknown disease label {token:?}")]
    UnknownDisease { token: String, row: usize },

    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("could not decode image {image_id}: {reason}")]
    ImageDecode { image_id: String, reason: String },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error(
        "pretrained weights for {kind} not found at {path}; place a safetensors export of the \
         backbone there (or point DACNET_WEIGHTS_DIR at a directory containing {kind}.safetensors)"
    )]
    PretrainedUnavailable { kind: String, path: PathBuf },

    #[error("fingerprint mismatch: checkpoint has {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("data leakage: {0}")]
    Leakage(String),

    #[error("non-finite loss at epoch {epoch}, step {step}; diagnostic snapshot at {snapshot}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        snapshot: PathBuf,
    },

    #[error("recipe error: {0}")]
    Recipe(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }
}
