use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis disagreement between tensors.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid configuration value (bad extents, empty alphabet, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller misuse of an operation (non-scalar loss, empty sample, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed text input, with the offending line number (1-based).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Malformed binary or structured input (PGM, vocab file).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Checkpoint load/save failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged.
    #[error("NaN loss at epoch {epoch}, batch {batch}, lr {lr}")]
    NanLoss { epoch: usize, batch: usize, lr: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 data error, 2 usage error, 3 model error.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Parse { .. } | Error::Format(_) | Error::Io(_) => 1,
            Error::Config(_) | Error::Usage(_) | Error::Dim(_) => 2,
            Error::Checkpoint(_) | Error::NanLoss { .. } => 3,
        }
    }
}
