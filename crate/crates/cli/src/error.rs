use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys or values.
    #[error("{0}")]
    Usage(String),
    /// Unreadable or malformed input files.
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] gfus::Error),
    /// A finished check that did not pass; details were already printed.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use gfus::Error as E;
        match self {
            CliError::Usage(_) | CliError::Failed(_) => 1,
            CliError::Data(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_) => 1,
                E::Parse { .. } | E::Format { .. } | E::Io { .. } | E::Index(_) | E::Length { .. } => 2,
                E::Contract(_) | E::Dimension(_) => 3,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
