use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] soh_core::Error),
    #[error("{what} not found: {}", path.display())]
    Missing { what: &'static str, path: PathBuf },
    #[error("{0}")]
    Usage(String),
    #[error("every record failed to preprocess")]
    AllFailed,
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 0 ok, 2 config, 3 missing artifact, 4 integrity, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use soh_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Missing { .. } => 3,
            CliError::AllFailed => 1,
            CliError::Core(e) => match e {
                E::Config(_) | E::Json { .. } | E::InsufficientConditions { .. } | E::EmptySplit(_) => 2,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
                E::Integrity(_) => 4,
                _ => 1,
            },
        }
    }
}
