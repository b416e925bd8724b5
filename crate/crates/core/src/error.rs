//! Error type shared across the engine.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate path: {0}")]
    DuplicatePath(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFiniteValue(String),
    #[error("timestamps not strictly increasing at row {row}")]
    NonMonotonicTimestamps { row: usize },
    #[error("corrupt store: {0}")]
    CorruptStore(String),
    #[error("store format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("decay factor {0} outside (0, 1]")]
    InvalidDecay(f64),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("knowledge base is empty")]
    EmptyKb,
    #[error("candidate view is empty")]
    EmptyView,
    #[error("unknown path: {0}")]
    UnknownPath(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("out-of-order record for {device}: {time} after {last}")]
    OutOfOrderRecord {
        device: String,
        time: f64,
        last: f64,
    },
    #[error("refusing to overwrite {}; pass --force", .0.display())]
    WouldOverwrite(PathBuf),
    #[error("io error on {}: {source}", .path.display())]
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

    /// CLI exit code class: 4 for backend failures, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BackendUnavailable(_) | Error::MalformedResponse(_) => 4,
            _ => 3,
        }
    }
}
