use std::path::PathBuf;

use thiserror::Error;

/// Kinds of checkpoint decoding failure. Each is distinct so callers can
/// tell a foreign file from a damaged one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointFault {
    BadMagic,
    UnsupportedVersion(u16),
    Truncated,
    BadHeader,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no masked tokens")]
    NoMaskedTokens,

    #[error("function is not deterministic: two forward passes gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("encoder transfer failed: missing {missing:?}, unexpected {extra:?}")]
    Transfer {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("checkpoint error: {0:?}")]
    Checkpoint(CheckpointFault),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable class name used on the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::NoMaskedTokens => "no_masked_tokens",
            Error::NonDeterministic { .. } => "non_deterministic",
            Error::Transfer { .. } => "transfer",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
