//! Pipeline commands behind the `bitemporal` binary. Each command is a
//! deterministic function of its resolved [`RunConfig`]; the worker count
//! only changes speed.

pub mod commands;
pub mod config;

use bitemporal_core::cd_eval::EvalError;
use bitemporal_core::dataset::DatasetError;
use bitemporal_core::denoiser::DenoiserError;
use bitemporal_core::generator::GeneratorError;
use thiserror::Error;

pub use commands::{cmd_eval, cmd_generate, cmd_inspect, cmd_train_denoiser, GenerateMode};
pub use config::RunConfig;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Arch(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Train(String),
    #[error("{0}")]
    Generate(String),
    #[error("{0}")]
    Eval(String),
}

impl CliError {
    /// Stable category printed as `error[category]`.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Arch(_) => "arch",
            CliError::Data(_) => "data",
            CliError::Train(_) => "train",
            CliError::Generate(_) => "generate",
            CliError::Eval(_) => "eval",
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { path, message } => CliError::Io { path, message },
            DatasetError::MissingFile(p) => CliError::Io {
                path: p,
                message: "no such file".into(),
            },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<GeneratorError> for CliError {
    fn from(e: GeneratorError) -> Self {
        CliError::Generate(e.to_string())
    }
}

impl From<DenoiserError> for CliError {
    fn from(e: DenoiserError) -> Self {
        CliError::Train(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::OverlappingSplits(_) => CliError::Data(e.to_string()),
            _ => CliError::Eval(e.to_string()),
        }
    }
}
