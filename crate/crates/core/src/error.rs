use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, lengths or cardinalities that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),
    /// A value outside the domain of an operation (zero norm, bad index, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// An input that violates a documented precondition of the callee.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! structural {
    ($($arg:tt)*) => { $crate::error::Error::Structural(format!($($arg)*)) };
}
macro_rules! domain {
    ($($arg:tt)*) => { $crate::error::Error::Domain(format!($($arg)*)) };
}
pub(crate) use domain;
pub(crate) use structural;
