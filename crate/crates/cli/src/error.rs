use std::path::PathBuf;

use thiserror::Error;

/// Command failures, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible privacy budget: {0}")]
    Infeasible(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("run diverged at round {round}")]
    Diverged { round: usize },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(privlora_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::MissingArtifact(_) => 4,
            CliError::Diverged { .. } => 5,
            CliError::Io { .. } => 1,
            CliError::Core(_) => 1,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }
}

impl From<privlora_core::Error> for CliError {
    fn from(e: privlora_core::Error) -> Self {
        use privlora_core::Error as E;
        match e {
            E::Infeasible(m) => CliError::Infeasible(m),
            E::InvalidParameter(_) | E::Dimension(_) | E::Parse { .. } | E::IncompleteGrid(_) => {
                CliError::Config(e.to_string())
            }
            E::TrainingDiverged { step, .. } => CliError::Diverged { round: step },
            other => CliError::Core(other),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io {
            path: PathBuf::from("<csv>"),
            source: std::io::Error::other(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
