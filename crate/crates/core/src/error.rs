use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("capacity exceeded: {what} is {actual}, limit {limit}")]
    Capacity {
        what: &'static str,
        actual: usize,
        limit: usize,
    },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {path} at byte offset {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("checksum mismatch for {path}: expected {expected}, got {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("download failed for {url}: {message}")]
    Download { url: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(
    context: impl Into<String>,
    expected: impl ToString,
    actual: impl ToString,
) -> Error {
    Error::Dimension {
        context: context.into(),
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
