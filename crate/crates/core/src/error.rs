use thiserror::Error;

/// Crate-wide error type.
///
/// Variants fall into two classes that the command line maps to distinct
/// exit codes: input/config/contract problems and I/O/transport problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error at line {line}: {message}")]
    Validation { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numeric error in {op}: {message}")]
    Numeric { op: &'static str, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            message: msg.into(),
        }
    }

    /// True for failures caused by the environment (files, network)
    /// rather than by the inputs or configuration.
    pub fn is_environmental(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Transport(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
