use thiserror::Error;

/// Errors raised across the introspection and steering pipeline.
#[derive(Debug, Error)]
pub enum VliError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error on `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("degenerate heatmap: {0}")]
    DegenerateHeatmap(String),

    #[error("degenerate inpaint: {0}")]
    DegenerateInpaint(String),

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VliError>;

impl VliError {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        VliError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        VliError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        VliError::Shape(msg.into())
    }
}
