use std::fmt;

use lmbench_core::Error as CoreError;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("training failed: {0}")]
    Training(#[source] CoreError),
    #[error(transparent)]
    Core(CoreError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn validation(msg: impl fmt::Display) -> Self {
        CliError::Validation(msg.to_string())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Training(_) => EXIT_TRAINING,
            CliError::Core(e) if is_training_failure(e) => EXIT_TRAINING,
            _ => EXIT_VALIDATION,
        }
    }
}

fn is_training_failure(e: &CoreError) -> bool {
    match e {
        CoreError::NonFiniteLoss { .. } | CoreError::Tensor(_) => true,
        CoreError::Fold { source, .. } | CoreError::ChainStage { source, .. } => is_training_failure(source),
        _ => false,
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}
