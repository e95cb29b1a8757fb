use std::path::{Path, PathBuf};

use magicnet_core::Error as CoreError;

/// Failures of the command-line layer, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed file contents; `offset` is the byte where parsing failed.
    #[error("{}: format error at byte {offset}: {message}", path.display())]
    Format { path: PathBuf, offset: u64, message: String },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) | CliError::Parse { .. } => 3,
            CliError::Core(CoreError::Numeric(_)) => 4,
            CliError::Core(_) => 3,
            CliError::Io { .. } | CliError::Format { .. } => 5,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn parse(path: &Path, message: impl ToString) -> Self {
        CliError::Parse { path: path.to_path_buf(), message: message.to_string() }
    }
}

/// Attaches a path to `std::io` results.
pub trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| CliError::io(path, e))
    }
}
