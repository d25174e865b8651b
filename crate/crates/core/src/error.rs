use alloc::string::String;
use core::fmt;

/// Errors produced by the core library.
///
/// Every variant carries enough context to be actionable without a
/// backtrace; the CLI prints these on a single line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    ShapeMismatch(String),
    /// A numeric operation produced or received NaN (or an infinity where
    /// only finite values are allowed).
    NonFinite(String),
    /// A configuration value violates a documented constraint.
    InvalidConfig(String),
    /// An input sequence or token is outside the expected vocabulary or
    /// domain.
    InvalidInput(String),
    /// A decode request cannot be satisfied (e.g. every key masked for
    /// some query, or an empty search space).
    Decode(String),
    /// A checkpoint byte stream is malformed or from an unknown version.
    Checkpoint(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::Decode(msg) => write!(f, "decode error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
