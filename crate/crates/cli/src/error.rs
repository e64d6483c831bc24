use std::path::Path;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] lightcone::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Core(lightcone::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// 2 for usage, 4 for a broken internal invariant, 3 for any other data
    /// or I/O failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(lightcone::Error::Invariant(_)) => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(lightcone::Error::Format(e.to_string()))
    }
}
