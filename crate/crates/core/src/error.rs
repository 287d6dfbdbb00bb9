//! Error taxonomy shared across the crate.

use std::fmt;
use std::io;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// The variants map onto process exit codes at the CLI boundary: `Usage`
/// and `Input` are caller mistakes (exit 2), everything else is a runtime
/// failure (exit 1).
#[derive(Debug)]
pub enum Error {
    /// Mathematically invalid input (non-finite values, zero norms, ...).
    Domain(String),
    /// API misuse: mismatched shapes, missing gradients, empty inputs.
    Usage(String),
    /// Malformed user-supplied data (bad masks, oversized token sequences).
    Input(String),
    /// Malformed file contents, with the byte offset where parsing stopped.
    Format { message: String, offset: u64 },
    /// A metric that is undefined for the given labels.
    UndefinedMetric(String),
    /// Filesystem / environment failures.
    Io { context: String, source: io::Error },
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(msg: impl Into<String>, offset: u64) -> Self {
        Error::Format { message: msg.into(), offset }
    }

    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    /// True for errors caused by how the caller invoked the API rather
    /// than by the environment.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Input(_))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Format { message, offset } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Error::UndefinedMetric(m) => write!(f, "undefined metric: {m}"),
            Error::Io { context, source } => write!(f, "io error ({context}): {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
