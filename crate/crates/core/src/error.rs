use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the library.
///
/// The CLI maps each variant onto a stable process exit code, see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("cost error: {0}")]
    Cost(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("unknown candidate `{0}`")]
    UnknownCandidate(String),

    #[error("candidate `{0}` has no matches")]
    NoMatches(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the command-line front end.
    ///
    /// 0 success, 2 config, 3 divergence, 4 missing artifact, 5 integrity,
    /// 6 evaluation mismatch, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schedule(_) => 2,
            Error::TrainingDiverged { .. } => 3,
            Error::MissingArtifact(_) => 4,
            Error::Integrity(_) => 5,
            Error::KeyMismatch(_) => 6,
            _ => 1,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
