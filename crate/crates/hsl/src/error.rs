//! Error type shared by every stage of the pipeline.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor/mask shapes do not agree.
    Dimension(String),
    /// A parameter is outside its documented domain.
    Parameter(String),
    /// A file did not match its declared on-disk format.
    Format(String),
    /// A mask required to have foreground support is empty.
    EmptyForeground,
    /// A numeric degeneracy: constant maps, vanished prototypes,
    /// failed constructive search.
    Degenerate(String),
    Io(std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: validation errors exit 2,
    /// numeric degeneracies exit 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::Parameter(_) | Error::Format(_) | Error::Io(_) => 2,
            Error::EmptyForeground | Error::Degenerate(_) => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::Parameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::EmptyForeground => write!(f, "empty foreground mask"),
            Error::Degenerate(msg) => write!(f, "numeric degeneracy: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

/// Shorthand for `Error::Dimension` with a formatted message.
macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}

/// Shorthand for `Error::Parameter` with a formatted message.
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::Parameter(format!($($arg)*)) };
}

pub(crate) use dim_err;
pub(crate) use param_err;
