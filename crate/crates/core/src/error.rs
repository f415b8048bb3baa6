//! Crate-wide error type with categorized variants.
//!
//! Each variant names the failure class a caller (or the CLI) can react to;
//! the payload is a human-readable message.

use std::fmt;

/// Categorized error for every fallible operation in the crate.
#[derive(Debug)]
pub enum Error {
    /// Tensor/matrix dimensions do not line up.
    Shape(String),
    /// A parameter is outside its documented range (temperature <= 0, K = 0, ...).
    Parameter(String),
    /// Numerically degenerate input (zero-norm row, ...).
    DegenerateInput(String),
    /// An API contract was violated (non-scalar loss, empty pool, ...).
    Contract(String),
    /// Math domain violation (log of non-positive value, ...).
    Domain(String),
    /// A serialized artifact has the wrong magic/version/layout.
    Format(String),
    /// A serialized artifact is truncated or internally inconsistent.
    Corrupt(String),
    /// A run configuration is invalid.
    Config(String),
    /// Synthetic data generation could not satisfy its constraints.
    Generation(String),
    /// A metric is undefined for the given inputs.
    Metric(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl Error {
    /// Short category tag used in CLI error messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Parameter(_) => "parameter",
            Error::DegenerateInput(_) => "degenerate-input",
            Error::Contract(_) => "contract",
            Error::Domain(_) => "domain",
            Error::Format(_) => "format",
            Error::Corrupt(_) => "corrupt",
            Error::Config(_) => "config",
            Error::Generation(_) => "generation",
            Error::Metric(_) => "metric",
            Error::Io(_) => "io",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io(e) => write!(f, "[io] {e}"),
            other => {
                let msg = match other {
                    Error::Shape(m)
                    | Error::Parameter(m)
                    | Error::DegenerateInput(m)
                    | Error::Contract(m)
                    | Error::Domain(m)
                    | Error::Format(m)
                    | Error::Corrupt(m)
                    | Error::Config(m)
                    | Error::Generation(m)
                    | Error::Metric(m) => m,
                    Error::Io(_) => unreachable!(),
                };
                write!(f, "[{}] {}", other.category(), msg)
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
