use std::path::Path;

use spectdiff_core::Error as CoreError;

/// Command failure, sorted by the exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Config(_) | CoreError::Parameter(_) => CliError::Config(msg),
            CoreError::Numerical(_) | CoreError::Training(_) => CliError::Numerical(msg),
            CoreError::Shape(_)
            | CoreError::Geometry(_)
            | CoreError::Degenerate(_)
            | CoreError::Precondition(_)
            | CoreError::Format(_)
            | CoreError::Io(_) => CliError::Data(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
