use slowfast_core::Error as CoreError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Config problems exit with 2, everything else with 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(CoreError),
    #[error("{0}")]
    Runtime(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => CliError::Config(m),
            CoreError::ContextWindow { .. } | CoreError::RankTooLarge { .. } | CoreError::UnknownActionName(_) => {
                CliError::Config(e.to_string())
            }
            e => CliError::Core(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}
