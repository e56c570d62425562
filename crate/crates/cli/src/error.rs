use massweights::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const INPUT: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Input(_) => exit::INPUT,
            CliError::Core(e) => match e {
                Error::Config(_) => exit::USAGE,
                Error::Input(_)
                | Error::TokenOutOfRange { .. }
                | Error::Checkpoint(_)
                | Error::Io { .. }
                | Error::Json(_) => exit::INPUT,
                Error::NumericFault { .. } | Error::NonFiniteLoss { .. } => exit::NUMERIC,
                Error::Shape { .. } | Error::Contract(_) | Error::Detection(_) => exit::OTHER,
            },
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
