//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite numeric input: {0}")]
    NumericInput(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Loss or gradient became NaN/Inf during a computation.
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate gene name {0:?}")]
    DuplicateGene(String),

    #[error("negative raw count {value} at row {row}, column {col} of {context}")]
    NegativeCount {
        context: String,
        row: usize,
        col: usize,
        value: f32,
    },

    #[error("malformed data in {context}: {detail}")]
    Data { context: String, detail: String },

    #[error("expression matrix is in the wrong state: {0}")]
    ExpressionState(String),

    #[error("unknown gene {0:?}")]
    UnknownGene(String),

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated section: {0}")]
    Truncated(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Exit-code class of an error, used by the command line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn data(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Data {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Argument(_) => ErrorClass::Usage,
            Error::NumericInput(_) | Error::NumericFailure(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
