//! Optional TOML configuration file.
//!
//! ```toml
//! [memory]
//! l_max = 41
//! beta = 50000
//! vocab = 152000
//! seed = 0
//!
//! [learn]
//! flush_batch = 512
//! encode_batch = 16
//! truncation = 41
//! prefix_ids = [1, 2, 3]
//! strict = false
//!
//! [decode]
//! window = 3
//! mix = 0.15
//! max_tokens = 15
//! prompt = "this image shows"
//! eos = [0]
//! stop_on_full_stop = true
//!
//! [sampler]
//! temperature = 1.0
//! rep_penalty = 1.1
//! top_k = 80
//! top_p = 0.95
//! clip_weight = 0.5
//! sharpen = 2.0
//! seed = 0
//! greedy = false
//! tie_break = "lowest-id"   # or "random"
//!
//! [provider]
//! kind = "synthetic"        # or "server"
//! server_timeout = 60.0
//! ```
//!
//! Every key is optional. Command-line flags override the file, which
//! overrides the built-in defaults. Paths are never read from the file; use
//! flags or the `HDFLIM_*` environment variables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub memory: MemorySection,
    pub learn: LearnSection,
    pub decode: DecodeSection,
    pub sampler: SamplerSection,
    pub provider: ProviderSection,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub l_max: Option<usize>,
    pub beta: Option<usize>,
    pub vocab: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnSection {
    pub flush_batch: Option<usize>,
    pub encode_batch: Option<usize>,
    pub truncation: Option<usize>,
    pub prefix_ids: Option<Vec<u32>>,
    pub strict: Option<bool>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub window: Option<usize>,
    pub mix: Option<f64>,
    pub max_tokens: Option<usize>,
    pub prompt: Option<String>,
    pub eos: Option<Vec<u32>>,
    pub stop_on_full_stop: Option<bool>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub temperature: Option<f64>,
    pub rep_penalty: Option<f64>,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub clip_weight: Option<f64>,
    pub sharpen: Option<f64>,
    pub seed: Option<u64>,
    pub greedy: Option<bool>,
    pub tie_break: Option<String>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: Option<String>,
    pub server_timeout: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Flag, else file value, else default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None, None, 3), 3);
    }

    #[test]
    fn parses_documented_example() {
        let doc = include_str!("config.rs")
            .lines()
            .take_while(|l| l.starts_with("//!"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .skip_while(|l| !l.starts_with("```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("```"))
            .collect::<Vec<_>>()
            .join("\n");
        let cfg: FileConfig = toml::from_str(&doc).unwrap();
        assert_eq!(cfg.memory.beta, Some(50_000));
        assert_eq!(cfg.decode.window, Some(3));
        assert_eq!(cfg.sampler.tie_break.as_deref(), Some("lowest-id"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[decode]\nwindw = 3").is_err());
    }
}
