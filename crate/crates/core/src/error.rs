use std::path::PathBuf;

use crate::mlp::ParamVector;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("head/target mismatch: {0}")]
    HeadMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training produced a non-finite loss. Carries the last parameters for
    /// which every loss evaluation was finite.
    #[error("training diverged at step {step} (seed {seed})")]
    Diverged {
        step: usize,
        seed: u64,
        checkpoint: Box<ParamVector>,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("matrix too large for dense oracle: p = {p} exceeds {limit}")]
    TooLarge { p: usize, limit: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("corrupt artifact {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unsupported artifact version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("csv error in {path}: {reason}")]
    Csv { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }

    /// True for failures that are numerical rather than caller mistakes.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::NonFinite(_)
                | Error::Corrupt { .. }
                | Error::Version { .. }
                | Error::Asymmetric(_)
        )
    }
}
