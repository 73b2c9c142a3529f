use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid key: expected 16 bytes, got {0}")]
    InvalidKey(usize),

    #[error("invalid block: expected 16 bytes, got {0}")]
    InvalidBlock(usize),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Adapter for `map_err` attaching the path to an I/O error.
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidKey(_) => "invalid_key",
            Error::InvalidBlock(_) => "invalid_block",
            Error::LengthMismatch(_) => "length_mismatch",
            Error::Shape(_) => "shape",
            Error::InvalidValue(_) => "invalid_value",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Format { .. } => "format",
            Error::Diverged(_) => "diverged",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Error {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}
