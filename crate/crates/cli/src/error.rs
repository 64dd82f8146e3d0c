use thiserror::Error;
use vlfuse::ErrorKind;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
/// Invalid configuration, override or command-line usage.
pub const EXIT_CONFIG: i32 = 2;
/// Unreadable or inconsistent data: checkpoints, reports, scene files.
pub const EXIT_DATA: i32 = 3;
/// Numerical failure or a failed gradient check.
pub const EXIT_NUMERIC: i32 = 4;
/// Filesystem errors and run-directory locks.
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] vlfuse::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("{0}")]
    Locked(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config(_) => ErrorKind::Config,
            CliError::Check(_) => ErrorKind::Numeric,
            CliError::Locked(_) | CliError::Io(_) => ErrorKind::Io,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            ErrorKind::Config => EXIT_CONFIG,
            ErrorKind::Data => EXIT_DATA,
            ErrorKind::Numeric => EXIT_NUMERIC,
            ErrorKind::Io => EXIT_IO,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(std::io::Error::other(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
