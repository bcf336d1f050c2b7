use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrupt mask: {0}")]
    CorruptMask(String),

    #[error("attention tape does not match upstream gradient: {0}")]
    TapeMismatch(String),

    #[error("text encoder failed on instance {index}: {message}")]
    Encoder { index: usize, message: String },

    #[error("schema violation in record {record}, field `{field}`: {message}")]
    Schema { record: usize, field: String, message: String },

    #[error("detector failed: {0}")]
    Detector(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl std::fmt::Display, got: impl std::fmt::Display) -> Self {
        Error::DimensionMismatch { expected: expected.to_string(), got: got.to_string() }
    }
}
