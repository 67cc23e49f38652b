use std::path::PathBuf;

use crate::dataset::KeypointId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid pose{}: keypoint {keypoint}: {reason}", context.as_ref().map(|c| format!(" in {c}")).unwrap_or_default())]
    Pose {
        keypoint: KeypointId,
        reason: String,
        context: Option<String>,
    },

    #[error("invalid pose{}: {reason}", context.as_ref().map(|c| format!(" in {c}")).unwrap_or_default())]
    PoseStructure {
        reason: String,
        context: Option<String>,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step}: {details}")]
    NonFinite { step: u64, details: String },

    #[error("thin-plate spline fit failed: {0}")]
    DegenerateSpline(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("schema hash mismatch: checkpoint has {expected}, got {actual}")]
    SchemaMismatch { expected: String, actual: String },

    #[error("backend unavailable: {0}")]
    Unavailable(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Image {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Attach a file or sample name to pose validation errors.
    pub fn with_context(self, ctx: impl Into<String>) -> Self {
        match self {
            Error::Pose {
                keypoint, reason, ..
            } => Error::Pose {
                keypoint,
                reason,
                context: Some(ctx.into()),
            },
            Error::PoseStructure { reason, .. } => Error::PoseStructure {
                reason,
                context: Some(ctx.into()),
            },
            other => other,
        }
    }
}
