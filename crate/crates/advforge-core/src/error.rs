use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error taxonomy for the toolkit.
///
/// The CLI maps these onto process exit codes: validation problems → 2,
/// I/O problems → 3, numeric failures (NaN/Inf escaping a computation) → 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or configuration contract violated by the caller.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// A config value is outside its documented domain.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// File-format problems (bad magic, truncation, count mismatches).
    #[error("data format: {0}")]
    DataFormat(String),

    /// Underlying I/O failure with the path that caused it. The source is
    /// surfaced through the error chain, not repeated in the message.
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A NaN or Inf was produced where a finite value is required.
    #[error("numeric failure: {0}")]
    NumericFailure(String),
}

impl Error {
    pub fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
