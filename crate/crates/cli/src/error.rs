use std::path::Path;

use hdflim_core::decoder::DecodeError;
use hdflim_core::learner::LearnError;
use hdflim_core::protomem::MemoryError;
use hdflim_core::providers::shard::ShardError;
use hdflim_core::providers::ProviderError;
use hdflim_core::sampler::SamplerError;
use thiserror::Error;

/// Failures, grouped by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<MemoryError> for CliError {
    fn from(e: MemoryError) -> Self {
        let msg = e.to_string();
        match e {
            MemoryError::Io { .. } | MemoryError::Locked(_) | MemoryError::InsufficientSpace { .. } => CliError::Io(msg),
            MemoryError::Exists(_) => CliError::Usage(format!("{msg} (use --resume or --overwrite)")),
            _ => CliError::Data(msg),
        }
    }
}

impl From<ShardError> for CliError {
    fn from(e: ShardError) -> Self {
        match e {
            ShardError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::Io(_) | ProviderError::Exited { .. } | ProviderError::Timeout(_) => CliError::Io(e.to_string()),
            ProviderError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Config(_) => CliError::Usage(e.to_string()),
            SamplerError::Scorer(p) => p.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::Memory(m) => m.into(),
            LearnError::Config(_) => CliError::Usage(e.to_string()),
            LearnError::Source(_) => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Config(_) => CliError::Usage(e.to_string()),
            DecodeError::Memory(m) => m.into(),
            DecodeError::Provider(p) => p.into(),
            DecodeError::Sampler(s) => s.into(),
            DecodeError::Diagnostics(_) => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
