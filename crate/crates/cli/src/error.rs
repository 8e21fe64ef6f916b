use std::path::{Path, PathBuf};
use std::process::ExitCode;

use hydra_core::Error as CoreError;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration and pipeline-order errors, 3 for data and file
    /// errors, 4 for numeric failures, 1 for broken internal contracts.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Pipeline(_) => 2,
                CoreError::Numeric(_) => 4,
                CoreError::Contract(_) | CoreError::FreezeViolation(_) => 1,
                CoreError::Dimension(_)
                | CoreError::EmptyOutput(_)
                | CoreError::InputShape(_)
                | CoreError::Index(_)
                | CoreError::BadMagic { .. }
                | CoreError::UnsupportedVersion(_)
                | CoreError::Truncated(_)
                | CoreError::DimensionOverflow(_)
                | CoreError::Malformed(_)
                | CoreError::Io { .. } => 3,
            },
        }
    }

    pub fn report(&self) -> ExitCode {
        eprintln!("error: {self}");
        ExitCode::from(self.exit_code())
    }
}
