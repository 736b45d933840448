use std::path::PathBuf;

use crate::training::checkpoint::Checkpoint;
use crate::training::HistoryRow;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: u64, message: String },

    #[error("degenerate transform: {0}")]
    DegenerateTransform(String),

    #[error("non-finite gradient for parameter `{name}`")]
    Divergence { name: String },

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingDiverged {
        epoch: usize,
        reason: String,
        last_good: Option<Box<Checkpoint>>,
        history: Vec<HistoryRow>,
    },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint blob truncated: need {needed} bytes, found {found}")]
    CheckpointTruncated { needed: u64, found: u64 },

    #[error("checkpoint parameter mismatch: {0}")]
    CheckpointNameMismatch(String),

    #[error("checkpoint shape mismatch for `{name}`: manifest {manifest:?}, model {model:?}")]
    CheckpointShapeMismatch {
        name: String,
        manifest: Vec<usize>,
        model: Vec<usize>,
    },

    #[error("malformed checkpoint manifest: {0}")]
    CheckpointManifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
