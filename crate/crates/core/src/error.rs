use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what} at byte offset {offset}: {detail}")]
    Format {
        what: &'static str,
        offset: u64,
        detail: String,
    },

    #[error("truncated {what}: needed {missing} more bytes at offset {offset}")]
    Truncated {
        what: &'static str,
        offset: u64,
        missing: u64,
    },

    #[error("signature mismatch: expected {expected}, found {found}")]
    Signature { expected: String, found: String },

    #[error("size mismatch: {0}")]
    Size(String),

    #[error("invalid {field}: {message}")]
    Invalid { field: &'static str, message: String },

    #[error("non-finite {what} at batch {batch}")]
    NonFinite { what: &'static str, batch: usize },

    #[error("image codec: {0}")]
    Codec(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Numerics(#[from] pccnn_numerics::NumericsError),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the caller's input is at fault (bad values, mismatched shapes,
    /// unreadable or missing files) rather than the computation.
    pub fn is_input_error(&self) -> bool {
        match self {
            CoreError::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            CoreError::NonFinite { .. } | CoreError::Numerics(_) => false,
            _ => true,
        }
    }

    pub(crate) fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        CoreError::Invalid {
            field,
            message: message.into(),
        }
    }
}
