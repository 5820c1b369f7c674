//! Command line entry points and the local HTTP API.

pub mod commands;
pub mod plot;
pub mod server;

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use stagewise::trainer::{default_protocol, desk_protocol, ProtocolConfig, TrainError};
use thiserror::Error;

/// Exit status for invalid input: configuration, manifest, checkpoint.
pub const EXIT_INPUT: u8 = 2;
/// Exit status when the training loss stops being finite.
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Diverged { .. } => EXIT_DIVERGED,
            TrainError::Config(_) | TrainError::Checkpoint(_) | TrainError::Data(_) | TrainError::Model(_) => EXIT_INPUT,
            TrainError::Metrics(stagewise::metrics::MetricsError::EmptyTestSplit) => EXIT_INPUT,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Mini network at 32/48/64 pixels.
    Desk,
    /// ResNet-50 at 128/224/229 pixels.
    Full,
}

impl Preset {
    pub fn config(self) -> ProtocolConfig {
        match self {
            Preset::Desk => desk_protocol(),
            Preset::Full => default_protocol(),
        }
    }
}

/// Reads a protocol config. Parse errors carry line and column; validation
/// errors name the offending field.
pub fn read_config(path: &Path) -> Result<ProtocolConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let config: ProtocolConfig = serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    config.validate().map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(config)
}

/// Config from `--config` if given, else the preset, with `--seed` applied.
pub fn resolve_config(path: Option<&Path>, preset: Preset, seed: Option<u64>) -> Result<ProtocolConfig, CliError> {
    let mut config = match path {
        Some(p) => read_config(p)?,
        None => preset.config(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Manifest from the flag, falling back to the config's.
pub fn manifest_path(flag: Option<&PathBuf>, config: &ProtocolConfig) -> Result<PathBuf, CliError> {
    flag.or(config.manifest.as_ref())
        .cloned()
        .ok_or_else(|| CliError::input("no manifest: pass --manifest or set \"manifest\" in the config"))
}
