use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] segcap_core::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("{0}")]
    Invalid(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("training diverged at step {step}: {source}")]
    Diverged { step: u64, source: segcap_core::Error },
}

impl Error {
    /// Process exit status: 3 for numeric failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(e) if e.is_numeric() => 3,
            Error::GradCheck(_) | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
