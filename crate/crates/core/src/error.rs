//! Error type shared across the crate, with a stable mapping to CLI exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tiling error: {0}")]
    Tiling(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{what}: bad magic")]
    BadMagic { what: &'static str },
    #[error("{what}: truncated")]
    Truncated { what: &'static str },
    #[error("{what}: unsupported version {found}")]
    VersionMismatch { what: &'static str, found: u32 },
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("checkpoint incompatible with config: field `{field}` (checkpoint: {ckpt}, config: {cfg})")]
    Incompatible {
        field: &'static str,
        ckpt: String,
        cfg: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MapError>;

impl MapError {
    /// CLI exit code: 1 usage, 2 data/IO, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            MapError::Usage(_) | MapError::Config { .. } => 1,
            MapError::Io(_)
            | MapError::BadMagic { .. }
            | MapError::Truncated { .. }
            | MapError::VersionMismatch { .. }
            | MapError::Incompatible { .. } => 2,
            MapError::Numeric(_) => 3,
            _ => 1,
        }
    }
}
