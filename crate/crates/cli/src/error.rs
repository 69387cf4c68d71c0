use avw2_core::Error;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config conflict: {0}")]
    Conflict(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Conflict(_) => "config-conflict",
            CliError::Core(e) => match e {
                Error::NanLoss { .. } | Error::NonFinite { .. } | Error::NanGradient(_) => "numeric",
                Error::InvalidInput(_) => "invalid-input",
                _ => "data",
            },
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind() {
            "numeric" => 4,
            "data" => 3,
            _ => 2,
        }
    }
}
