use std::fmt;

/// Unified error type for the whole library.
///
/// The CLI maps categories to exit codes: configuration-class errors
/// (`Shape`, `Domain`, `Constraint`, `Config`, `Stats`) exit 2, `Numeric`
/// exits 3, file-class errors (`Io`, `Format`, `Consistency`) exit 4.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible matrix or parameter shapes.
    Shape(String),
    /// Argument outside the mathematical domain of an operation.
    Domain(String),
    /// Violation of a model constraint (e.g. alpha must stay <= 1).
    Constraint(String),
    /// Invalid or inconsistent run configuration.
    Config(String),
    /// Statistically meaningless request (e.g. variance of one draw).
    Stats(String),
    /// Malformed file contents.
    Format(String),
    /// Mutually inconsistent inputs (e.g. image/label count mismatch).
    Consistency(String),
    /// Underlying I/O failure.
    Io(String),
    /// Non-finite value or failed numerical procedure; message names where.
    Numeric(String),
}

impl Error {
    /// Process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Domain(_)
            | Error::Constraint(_)
            | Error::Config(_)
            | Error::Stats(_) => 2,
            Error::Numeric(_) => 3,
            Error::Format(_) | Error::Consistency(_) | Error::Io(_) => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Constraint(m) => write!(f, "constraint error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Stats(m) => write!(f, "statistics error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Consistency(m) => write!(f, "consistency error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
