//! Error types shared across the crate.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, ClappError>;

/// Errors emitted by the library.
#[derive(Debug, Error)]
pub enum ClappError {
    /// Shape or dimension mismatch between tensors or layer wiring.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Not enough recorded history to look back `needed` steps.
    #[error("history error: need {needed} recorded steps, have {available}")]
    History { needed: usize, available: usize },

    /// Invalid input data (empty dataset, missing layer, single-class probe set, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Invalid run configuration; `field` is the JSON path of the offending field.
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A gradient-check tolerance was exceeded.
    #[error("tolerance breach: {0}")]
    Tolerance(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ClappError {
    pub fn dimension(msg: impl Into<String>) -> Self {
        ClappError::Dimension(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        ClappError::Input(msg.into())
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        ClappError::Config {
            field: field.into(),
            message: msg.into(),
        }
    }
}
