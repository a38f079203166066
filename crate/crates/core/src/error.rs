use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, MeerError>;

#[derive(Debug, thiserror::Error)]
pub enum MeerError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss at step {step} ({term}); offending batch indices {indices:?}")]
    NonFinite {
        step: usize,
        term: String,
        indices: Vec<usize>,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl MeerError {
    /// Stable machine-readable category, printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            MeerError::InvalidArgument(_) => "invalid-argument",
            MeerError::Shape(_) => "shape",
            MeerError::LabelOutOfRange { .. } => "label-out-of-range",
            MeerError::Io { .. } => "io",
            MeerError::Image { .. } => "image",
            MeerError::Parse(_) => "parse",
            MeerError::Config(_) => "config",
            MeerError::Checkpoint(_) => "checkpoint",
            MeerError::Empty(_) => "empty-input",
            MeerError::NonFinite { .. } => "non-finite",
            MeerError::Invariant(_) => "invariant",
            MeerError::Tensor(_) => "tensor",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MeerError::Io {
            path: path.into(),
            source,
        }
    }
}
