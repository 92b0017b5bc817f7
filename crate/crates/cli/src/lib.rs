//! Config-driven experiment runner for the lipstab laboratory.
//!
//! Each experiment produces a set of named artifacts (CSV tables, a JSON
//! summary, the config echo) which are written atomically into the output
//! directory. Nothing in an artifact depends on wall-clock time or thread
//! count, so re-running from `config_echo.toml` reproduces every file byte
//! for byte.

pub mod config;
pub mod experiments;
pub mod output;
pub mod plot;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{ConfigError, ExperimentConfig, ExperimentKind};
pub use experiments::run_experiment;
pub use output::{Artifact, RunOutput};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] lipstab::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Missing(String),
}

impl CliError {
    /// 2 for anything wrong with the configuration, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(lipstab::Error::Config(_)) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Execution settings that never influence results.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ctx {
    pub exec: lipstab::Exec,
    pub verbose: bool,
}

impl Ctx {
    pub fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[lipstab] {}", msg.as_ref());
        }
    }
}
