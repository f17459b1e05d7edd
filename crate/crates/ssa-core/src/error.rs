use thiserror::Error;

/// Errors shared by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated its documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Two tensors or fields that must agree in shape did not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation that needs at least one element received none.
    #[error("empty input: {0}")]
    Empty(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A forward/backward cache was used with parameters it was not built from.
    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
