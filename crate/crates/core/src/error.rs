use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A poster record broke one of its structural invariants.
    #[error("invalid record {id}: {invariant}")]
    InvalidRecord { id: String, invariant: String },

    /// Content could not be placed on the requested canvas.
    #[error("layout failed: {0}")]
    Layout(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("caption parse error at token {index} ({token:?}): {reason}")]
    CaptionParse {
        index: usize,
        token: String,
        reason: String,
    },

    #[error("empty task pool for {0}")]
    EmptyTaskPool(String),

    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid_record(id: &str, invariant: impl Into<String>) -> Self {
        Error::InvalidRecord {
            id: id.to_string(),
            invariant: invariant.into(),
        }
    }
}
