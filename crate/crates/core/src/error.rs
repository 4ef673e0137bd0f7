use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar (1, 1, 1, 1) loss, got {0}")]
    NotScalar(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("batch norm layer `{0}` has no running statistics; run a training pass or load a checkpoint first")]
    MissingRunningStats(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown layer `{name}`; valid layers are: {}", valid.join(", "))]
    UnknownLayer { name: String, valid: Vec<String> },

    #[error("checkpoint has bad magic bytes {0:?}, expected \"CBLF\"")]
    BadMagic([u8; 4]),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is truncated: {0}")]
    Truncated(String),

    #[error("checkpoint header is malformed: {0}")]
    MalformedHeader(String),

    #[error("checkpoint tensor `{name}` disagrees with the model spec: {detail}")]
    TensorMismatch { name: String, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("failed to decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
