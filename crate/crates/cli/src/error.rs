use thiserror::Error;

/// Failures of a subcommand, each tied to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Incompatible(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }

    /// Classify a core error raised while running a loaded experiment.
    pub fn from_core(e: ddlab_core::Error) -> Self {
        match e {
            ddlab_core::Error::Divergence(m) => CliError::Divergence(m),
            ddlab_core::Error::NonFinite(m) => CliError::Divergence(format!("non-finite value in {m}")),
            ddlab_core::Error::Checkpoint(m) => CliError::Incompatible(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ddlab_core::Error> for CliError {
    fn from(e: ddlab_core::Error) -> Self {
        CliError::from_core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
