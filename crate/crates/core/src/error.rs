//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An operation produced NaN or infinity.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// A caller broke an API contract (wrong node, scalar expected, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value. `key` names the offending setting.
    #[error("configuration error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    /// Not enough data to build even one window.
    #[error("empty window set: {0}")]
    EmptySet(String),

    /// Division by a near-zero learned scale, etc.
    #[error("numeric degeneracy: {0}")]
    Degenerate(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("client {client} failed in round {round}: {message}")]
    ClientFailed {
        client: usize,
        round: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user configuration rather than runtime state.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
