use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter lies outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),
    /// Inconsistent dimensions between arguments.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Invalid or inconsistent input data.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A factorisation or iterative scheme failed to produce a usable result.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// A certified property (axiom, convergence certificate) does not hold.
    #[error("certificate violated: {0}")]
    Certificate(String),
    /// Requested combination of options is not implemented.
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
