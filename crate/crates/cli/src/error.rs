//! CLI errors and their process exit codes.

use pianist_core::autodiff::CheckpointError;
use pianist_core::env::EnvError;
use pianist_core::midi::MidiError;
use pianist_core::trainer::{DemoError, TrainError};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_BAD_ARGS: u8 = 2;
pub const EXIT_PARSE: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("bad arguments: {0}")]
    BadArgs(String),
    #[error("cannot parse input: {0}")]
    Parse(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Failed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::BadArgs(_) => EXIT_BAD_ARGS,
            CliError::Parse(_) => EXIT_PARSE,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Failed(_) | CliError::Io { .. } => EXIT_FAILURE,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<MidiError> for CliError {
    fn from(e: MidiError) -> Self {
        CliError::Parse(format!("midi: {e}"))
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Parse(format!("checkpoint: {e}"))
    }
}

impl From<DemoError> for CliError {
    fn from(e: DemoError) -> Self {
        CliError::Failed(format!("demonstration: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::Diffusion(_) | TrainError::Autodiff(_) => {
                CliError::Numerical(e.to_string())
            }
            TrainError::OutOfRange { .. } | TrainError::InvalidConfig(_) => CliError::BadArgs(e.to_string()),
            TrainError::Env(EnvError::EmptySong) => CliError::Parse(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}
