use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    /// A check ran to completion and failed.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Runtime(#[from] argmamba::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Verification(_) => 2,
            // bad configuration values are usage errors too
            CliError::Runtime(argmamba::Error::Config(_)) => 1,
            CliError::Runtime(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
