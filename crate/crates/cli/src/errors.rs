use gprune_core::CoreError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("report error: {0}")]
    Report(String),
}

impl CliError {
    /// Process exit code: 0 success, 2 config error, 3 numeric divergence,
    /// 4 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dataset(_) => 4,
            CliError::Io(_) | CliError::Report(_) => 4,
            CliError::Core(core) => match core {
                CoreError::Diverged { .. } | CoreError::NonFinite { .. } => 3,
                CoreError::Io(_)
                | CoreError::CheckpointFormat(_)
                | CoreError::CheckpointVersion { .. }
                | CoreError::CheckpointTruncated { .. }
                | CoreError::ChecksumMismatch { .. }
                | CoreError::PlanFormat(_) => 4,
                _ => 2,
            },
        }
    }
}
