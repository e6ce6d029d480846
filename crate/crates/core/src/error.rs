use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row {row} has no unmasked position")]
    FullyMasked { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Checkpoint-specific failures, kept separate so callers can match on the kind.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,

    #[error("unsupported checkpoint format version {0}")]
    Version(u32),

    #[error("architecture hash mismatch: checkpoint has {found}, model expects {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("truncated checkpoint: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("malformed checkpoint header: {0}")]
    Header(String),

    #[error("parameter `{name}`: {message}")]
    Parameter { name: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 1 = validation/parse, 2 = numerical, 3 = I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Io { .. } => 3,
            Error::Numerical(_) => 2,
            Error::Csv(e) if e.is_io_error() => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
