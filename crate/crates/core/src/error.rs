use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("manifest row {row}: field `{field}`: {message}")]
    ManifestRow {
        row: usize,
        field: &'static str,
        message: String,
    },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("unknown weather condition {0:?}")]
    UnknownWeather(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("embedding provider failed on {input:?}: {message}")]
    Provider { input: String, message: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite {component} loss (batch ids: {batch_ids:?})")]
    NonFinite {
        component: &'static str,
        batch_ids: Vec<String>,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
