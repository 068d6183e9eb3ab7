//! Batch experiment runner for the `datorus` binary.

pub mod cache;
pub mod config;
pub mod plots;
pub mod run;

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("computation failed: {0}")]
    Core(#[from] datorus_core::Error),
    #[error("computation failed: {0}")]
    Compute(String),
    #[error("corrupt cache: {0}")]
    CorruptCache(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ConfigInvalid(_) => 2,
            _ => 1,
        }
    }
}
