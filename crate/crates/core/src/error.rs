use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("numerical abort at step {step}: {msg}")]
    Numerical { step: u64, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 validation/configuration, 2 integrity/io, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Config(_) => 1,
            Error::Integrity(_) | Error::Io { .. } => 2,
            Error::Numerical { .. } => 3,
        }
    }
}

impl From<autograd::io::BlobError> for Error {
    fn from(e: autograd::io::BlobError) -> Self {
        match e {
            autograd::io::BlobError::Io { path, source } => Error::Io { path, source },
            other => Error::Integrity(other.to_string()),
        }
    }
}
