//! Crate-wide error type.

/// Errors surfaced by any stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum RiclError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("duplicate sample id {0}")]
    DuplicateId(u64),

    #[error("config error in `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("run error in {context}: {source}")]
    Run {
        context: String,
        #[source]
        source: Box<RiclError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl RiclError {
    /// Wraps an error with run context (which seed/method/stage failed).
    pub fn in_context(self, context: impl Into<String>) -> Self {
        RiclError::Run {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the error stems from configuration rather than execution.
    pub fn is_config(&self) -> bool {
        match self {
            RiclError::Config { .. } => true,
            RiclError::Run { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, RiclError>;
