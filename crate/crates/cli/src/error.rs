use std::path::PathBuf;

/// Failures of a pipeline command.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] scarseg_core::Error),
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(PathBuf),
}

impl CliError {
    /// Stable machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Config(_) => "BAD_CONFIG",
            CliError::MissingInput(_) => "MISSING_INPUT",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Core(scarseg_core::Error::io(path, source))
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
