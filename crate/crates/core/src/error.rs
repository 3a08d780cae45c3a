use thiserror::Error;

/// Errors produced by the distillation library.
#[derive(Debug, Error)]
pub enum EopdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A loss or gradient turned NaN/Inf during training. `diagnostic` is a
    /// JSON dump of the offending token record.
    #[error("non-finite value in {what} at iteration {iteration}: {diagnostic}")]
    NonFinite {
        what: String,
        iteration: usize,
        diagnostic: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EopdError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        EopdError::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, EopdError>;
