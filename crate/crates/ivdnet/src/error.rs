use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on user-supplied values was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// An index or epoch fell outside its documented range.
    #[error("range error: {0}")]
    Range(String),

    /// Tensor or volume shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Training diverged or produced a non-finite loss.
    #[error("training aborted: {0}")]
    Training(String),

    /// A file could not be read or written.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents are not in the expected format.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
