use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Incompatible matrix shapes; carries the operation name and both shapes.
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    /// An input that must be nonempty was empty.
    Empty(&'static str),
    /// Invalid configuration value or file.
    Config(String),
    /// Checkpoint file malformed or inconsistent.
    Checkpoint(String),
    /// A gradient or loss became NaN/Inf; names the offending tensor or site.
    NonFinite(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                lhs.0, lhs.1, rhs.0, rhs.1
            ),
            Error::Empty(what) => write!(f, "empty input: {what}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
