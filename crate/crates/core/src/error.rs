use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NmtError>;

#[derive(Debug, Error)]
pub enum NmtError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("line count mismatch: {}", describe_counts(.counts))]
    Alignment { counts: Vec<(PathBuf, usize)> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("incompatible: {0}")]
    Compatibility(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

fn describe_counts(counts: &[(PathBuf, usize)]) -> String {
    counts
        .iter()
        .map(|(p, n)| format!("{}={}", p.display(), n))
        .collect::<Vec<_>>()
        .join(", ")
}

impl NmtError {
    pub fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        NmtError::Dimension { op, left, right }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        NmtError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            NmtError::Argument(_) | NmtError::Config(_) => 1,
            NmtError::Io { .. } | NmtError::Alignment { .. } | NmtError::Checkpoint(_) => 2,
            NmtError::Numeric(_) => 3,
            NmtError::Compatibility(_) => 4,
            NmtError::Dimension { .. } | NmtError::Vocabulary { .. } => 1,
        }
    }
}
