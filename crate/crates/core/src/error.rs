//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the search stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Search-space parameters that define no space (e.g. zero intermediate nodes).
    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    /// A malformed encoding vector. `index` points at the offending entry when known.
    #[error("invalid encoding{}: {reason}", index.map(|i| format!(" at index {i}")).unwrap_or_default())]
    Encoding {
        index: Option<usize>,
        reason: String,
    },

    /// An input that makes the requested quantity undefined (e.g. zero-norm vector).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A computation left the finite range or hit an impossible value.
    #[error("numerical fault: {0}")]
    NumericalFault(String),

    /// Invalid configuration. `key` names the offending field.
    #[error("config error ({key}): {reason}")]
    Config { key: String, reason: String },

    /// A file whose layout does not match its documented format.
    #[error("format error in {what}: {reason}")]
    Format { what: String, reason: String },

    /// Tensor or vector dimensions that do not line up.
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: String,
        got: String,
    },

    /// A genotype that cannot be instantiated at the configured resolution.
    #[error("infeasible genotype: {0}")]
    Infeasible(String),

    /// A single trial failed; the search may continue.
    #[error("trial {trial} failed: {reason}")]
    Trial { trial: usize, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
