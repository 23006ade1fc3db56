use std::path::PathBuf;

use thiserror::Error;

/// Library-wide error type. Variants are kept distinct where callers need to
/// tell failure classes apart (exit codes, format diagnostics).
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version: expected {expected}, found {found}")]
    VersionMismatch { expected: u8, found: u8 },

    #[error("truncated input at byte {offset}: {what}")]
    Truncated { offset: u64, what: String },

    #[error("format error at byte {offset}: {what}")]
    Format { offset: u64, what: String },

    #[error("dimension mismatch: {what}")]
    Dimension { what: String },

    #[error("value out of range: {what}")]
    Range { what: String },

    #[error("invalid spec: {what}")]
    Spec { what: String },

    #[error("config error: {what}")]
    Config { what: String },

    #[error("shape error{}: {what}", layer.map(|i| format!(" in layer {i}")).unwrap_or_default())]
    Shape { layer: Option<usize>, what: String },

    #[error("numerical failure: {what}")]
    Numeric {
        what: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(offset: u64, what: impl Into<String>) -> Self {
        Error::Format {
            offset,
            what: what.into(),
        }
    }

    pub fn dimension(what: impl Into<String>) -> Self {
        Error::Dimension { what: what.into() }
    }

    pub fn range(what: impl Into<String>) -> Self {
        Error::Range { what: what.into() }
    }

    pub fn spec(what: impl Into<String>) -> Self {
        Error::Spec { what: what.into() }
    }

    pub fn config(what: impl Into<String>) -> Self {
        Error::Config { what: what.into() }
    }

    /// Process exit class: 1 usage/config, 2 data/format, 3 numerical abort.
    pub fn exit_class(&self) -> u8 {
        match self {
            Error::Spec { .. } | Error::Config { .. } => 1,
            Error::Numeric { .. } => 3,
            _ => 2,
        }
    }

    /// Short machine-readable kind tag for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MagicMismatch { .. } => "magic-mismatch",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Truncated { .. } => "truncated",
            Error::Format { .. } => "format",
            Error::Dimension { .. } => "dimension",
            Error::Range { .. } => "range",
            Error::Spec { .. } => "spec",
            Error::Config { .. } => "config",
            Error::Shape { .. } => "shape",
            Error::Numeric { .. } => "numeric",
            Error::InsufficientSamples { .. } => "insufficient-samples",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
