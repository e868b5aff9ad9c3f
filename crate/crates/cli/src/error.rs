use std::fmt;

/// Failure of a command, carrying its process exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unknown tokens or an invalid configuration (exit 2).
    Usage(anyhow::Error),
    /// Anything that went wrong while doing the work (exit 1).
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        CliError::Usage(anyhow::anyhow!("{msg}"))
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        CliError::Runtime(anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// Tags an error with the exit class it belongs to.
pub trait Classify<T> {
    fn usage_err(self) -> CliResult<T>;
    fn runtime_err(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage_err(self) -> CliResult<T> {
        self.map_err(|e| CliError::Usage(e.into()))
    }

    fn runtime_err(self) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}
