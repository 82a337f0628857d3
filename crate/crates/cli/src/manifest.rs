//! Reproducibility record written next to every artifact.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub engine_version: String,
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved configuration: seeds, dims and every parameter.
    pub config: Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub started: String,
    pub finished: String,
    /// Command-specific results, such as a learning summary.
    pub result: Value,
}

pub fn digest(path: &Path) -> Result<InputDigest, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = BufReader::with_capacity(1 << 20, file);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    let mut bytes = 0u64;
    loop {
        let n = r.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(InputDigest {
        path: path.to_path_buf(),
        bytes,
        sha256: format!("{:x}", h.finalize()),
    })
}

pub fn timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// `<artifact>.manifest.json`.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

pub struct ManifestBuilder {
    command: String,
    started: DateTime<Utc>,
    config: Value,
    inputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            started: Utc::now(),
            config: Value::Null,
            inputs: Vec::new(),
        }
    }

    pub fn config(&mut self, config: impl Serialize) -> &mut Self {
        self.config = serde_json::to_value(config).expect("config serializes");
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    /// Writes the manifest for `outputs` beside the first of them.
    pub fn write(&self, outputs: &[&Path], result: impl Serialize) -> Result<PathBuf, CliError> {
        let manifest = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.clone(),
            argv: std::env::args().collect(),
            config: self.config.clone(),
            inputs: self.inputs.iter().map(|p| digest(p)).collect::<Result<_, _>>()?,
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            started: timestamp(self.started),
            finished: timestamp(Utc::now()),
            result: serde_json::to_value(result).expect("result serializes"),
        };
        let path = manifest_path(outputs[0]);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
