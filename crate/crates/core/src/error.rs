use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("sample `{0}` has no scene annotation")]
    Unannotated(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },

    #[error("mask unavailable for sample `{0}`")]
    MaskUnavailable(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] ::image::ImageError),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } => 2,
            Error::Io { .. } | Error::Image(_) => 3,
            _ => 1,
        }
    }
}
