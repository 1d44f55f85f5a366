//! The `dynprompt` command-line workflow: pre-train a toy backbone, adapt
//! it with any strategy, evaluate, sweep ablations and chat.
//!
//! Every command is a library function so it can be scripted and tested
//! without spawning the binary.

pub mod chat;
pub mod config;
pub mod sweep;
pub mod workflow;

use dynprompt_core::Error;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 0 success, 1 invariant failure, 2 usage or configuration error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Config(_)
                | Error::Parse { .. }
                | Error::Io { .. }
                | Error::EmptyCorpus(_)
                | Error::TokenRange { .. }
                | Error::Capacity { .. } => 2,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
