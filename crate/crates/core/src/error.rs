use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite{0}")]
    NotPositiveDefinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("all log-weights are -inf or NaN")]
    DegenerateWeights,

    #[error("coordinate {0} has zero variance across draws")]
    ZeroVariance(usize),

    #[error("too few draws: {0}")]
    TooFewDraws(String),

    #[error("method {method} requires {what}")]
    MissingInput { method: String, what: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Machine-readable error classes reported by the command line tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Parse,
    DimMismatch,
    MethodInput,
    Config,
    Numeric,
    Io,
}

impl ErrorClass {
    pub fn code(self) -> &'static str {
        match self {
            ErrorClass::Parse => "E_PARSE",
            ErrorClass::DimMismatch => "E_DIM_MISMATCH",
            ErrorClass::MethodInput => "E_METHOD_INPUT",
            ErrorClass::Config => "E_CONFIG",
            ErrorClass::Numeric => "E_NUMERIC",
            ErrorClass::Io => "E_IO",
        }
    }

    /// Process exit status for this class.
    pub fn exit_status(self) -> i32 {
        match self {
            ErrorClass::Parse => 2,
            ErrorClass::DimMismatch => 3,
            ErrorClass::MethodInput => 4,
            ErrorClass::Config => 5,
            ErrorClass::Numeric => 6,
            ErrorClass::Io => 7,
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::DimensionMismatch(_) => ErrorClass::DimMismatch,
            Error::MissingInput { .. } => ErrorClass::MethodInput,
            Error::Parse(_) => ErrorClass::Parse,
            Error::Config(_) | Error::InvalidParameter(_) | Error::TooFewDraws(_) => {
                ErrorClass::Config
            }
            Error::Io(_) => ErrorClass::Io,
            Error::NotSymmetric(_)
            | Error::NotPositiveDefinite(_)
            | Error::NonFinite(_)
            | Error::DegenerateWeights
            | Error::ZeroVariance(_) => ErrorClass::Numeric,
        }
    }
}

pub(crate) fn dim_mismatch(what: &str, expected: usize, got: usize) -> Error {
    Error::DimensionMismatch(format!("{what}: expected {expected}, got {got}"))
}
