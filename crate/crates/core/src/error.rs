//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the toolkit.
#[derive(Debug)]
pub enum Error {
    /// A precondition on an operation's arguments was violated
    /// (shape mismatch, odd dimensions, out-of-range parameter, ...).
    InvalidArgument(String),
    /// A file payload could not be decoded. `offset` is the byte position
    /// at which decoding failed.
    Format {
        path: Option<PathBuf>,
        offset: u64,
        message: String,
    },
    /// An underlying I/O failure, tagged with the path involved.
    Io { path: PathBuf, message: String },
    /// A metric is mathematically undefined for the given input
    /// (e.g. a frequency ratio over a zero-energy image).
    UndefinedMetric(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            offset,
            message: msg.into(),
        }
    }

    /// Attaches a path to a format error produced while decoding a buffer.
    pub fn with_path(self, path: impl Into<PathBuf>) -> Self {
        match self {
            Error::Format {
                offset, message, ..
            } => Error::Format {
                path: Some(path.into()),
                offset,
                message,
            },
            other => other,
        }
    }

    pub fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Format {
                path,
                offset,
                message,
            } => match path {
                Some(p) => write!(
                    f,
                    "format error in {} at byte {offset}: {message}",
                    p.display()
                ),
                None => write!(f, "format error at byte {offset}: {message}"),
            },
            Error::Io { path, message } => {
                write!(f, "io error on {}: {message}", path.display())
            }
            Error::UndefinedMetric(msg) => write!(f, "undefined metric: {msg}"),
        }
    }
}

impl std::error::Error for Error {}
