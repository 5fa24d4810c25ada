use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    ShapeMismatch {
        expected: String,
        got: String,
        context: &'static str,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("gaze lies on background, no instance of interest")]
    NoInstanceAtGaze,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>, context: &'static str) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
            context,
        }
    }
}
