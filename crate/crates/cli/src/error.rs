use thiserror::Error;

/// Errors split by who has to act: the user (exit 1) or a developer (exit 2).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Internal(_) => 2,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl From<qpi_core::Error> for CliError {
    fn from(e: qpi_core::Error) -> Self {
        use qpi_core::Error as E;
        match e {
            E::NonFiniteLoss { .. }
            | E::NonFiniteSampling { .. }
            | E::ScheduleInvariant(_)
            | E::BackwardBeforeForward => CliError::Internal(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(format!("I/O: {e}"))
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::Usage(format!("image: {e}"))
    }
}
