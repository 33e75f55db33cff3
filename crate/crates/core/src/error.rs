use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is outside its allowed range or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric precondition was violated (zero norm, bad label, shape mismatch).
    #[error("domain error: {0}")]
    Domain(String),

    /// Dataset manifest or image ingestion failed.
    #[error("data error: {0}")]
    Data(String),

    /// A serialized artifact could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: u64, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than a runtime failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Data(_) | Error::Format(_) | Error::Domain(_)
        )
    }
}
