use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected} features, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("non-finite gradient in tensor {tensor_index} at offset {flat_offset}")]
    NonFiniteGradient { tensor_index: usize, flat_offset: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: u64, loss: f64 },

    #[error("IDX parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("PCA needs at least {needed} snapshots, got {got}")]
    TooFewSnapshots { needed: usize, got: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::NonFiniteGradient { .. } => 2,
            Error::Io { .. } | Error::Parse { .. } | Error::Checkpoint(_) => 3,
            _ => 1,
        }
    }
}
