use std::path::PathBuf;

use gpsc_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing {path}; run `gpsc {stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error(transparent)]
    Core(CoreError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::MissingArtifact { .. } => 4,
            CliError::Core(e) => match e {
                CoreError::Factorization { .. } | CoreError::NegativeVariance(_) | CoreError::NonFiniteStart => 3,
                CoreError::Io { .. } => 1,
                _ => 2,
            },
            CliError::Io { .. } => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(CoreError::Json(e))
    }
}
