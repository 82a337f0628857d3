//! Autoregressive caption decoding against a packed prototype memory.
//!
//! Each step encodes the current tokens once, binds the last hidden state's
//! hypervector to the image hypervector, scores every vocabulary prototype
//! by `β − hamming` over a window of upcoming positions, blends in the
//! language-model logits and hands the result to the sampler.

use std::collections::HashMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{combine, EncodeError, Encoders, PatchFeatures};
use crate::hdcore::{hamming_batch, HdError, Hypervector, PackedHypervector};
use crate::protomem::{MemoryError, PackedMemory};
use crate::providers::{ModelProvider, ProviderError};
use crate::sampler::{build_candidates, select_token, Candidates, SamplerConfig, SamplerError};

pub const DIAGNOSTICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode configuration: {0}")]
    Config(String),
    #[error("position {position} outside 2..={l_max}")]
    Position { position: usize, l_max: usize },
    #[error("logit vectors differ in length ({hd} vs {lm})")]
    LengthMismatch { hd: usize, lm: usize },
    #[error("largest HD logit is {0}; it must be positive")]
    NonPositiveHd(f64),
    #[error("session already finished ({0:?})")]
    Finished(FinishReason),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Hd(#[from] HdError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("provider: {0}")]
    Provider(#[from] ProviderError),
    #[error("diagnostics: {0}")]
    Diagnostics(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Eos,
    FullStop,
    MaxLen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Number of positions searched, starting at the next one.
    pub window: usize,
    /// Weight of the normalized language-model logits.
    pub mix_weight: f64,
    /// Generated tokens, prompt excluded.
    pub max_new_tokens: usize,
    pub eos_tokens: Vec<u32>,
    /// Stop after a token whose text ends in `.`.
    pub stop_on_full_stop: bool,
    /// Token ids decoding starts from. Usually the training prefix.
    pub prompt: Vec<u32>,
    /// Entries kept per step in the diagnostics.
    pub diagnostics_top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            window: 3,
            mix_weight: 0.15,
            max_new_tokens: 15,
            eos_tokens: Vec::new(),
            stop_on_full_stop: true,
            prompt: Vec::new(),
            diagnostics_top_k: 10,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, l_max: usize, vocab_size: usize) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::Config(m));
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if !(self.mix_weight >= 0.0 && self.mix_weight.is_finite()) {
            return bad("mix weight must be non-negative".into());
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be at least 1".into());
        }
        if self.prompt.is_empty() {
            return bad("prompt must contain at least one token".into());
        }
        if self.prompt.len() >= l_max {
            return bad(format!("prompt of {} tokens leaves no position below l_max {l_max}", self.prompt.len()));
        }
        if let Some(t) = self.prompt.iter().chain(&self.eos_tokens).find(|&&t| t as usize >= vocab_size) {
            return bad(format!("token {t} outside vocabulary of {vocab_size}"));
        }
        Ok(())
    }
}

/// Windowed HD logits and, per token, the offset that produced its maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct HdLogits {
    pub values: Vec<f64>,
    pub offsets: Vec<u32>,
}

/// `max_{w < W} (β − hamming(slice(position + w)[t], comb))` for every token
/// `t`, skipping offsets past `l_max`. Ties keep the smallest offset.
pub fn hd_logits(mem: &PackedMemory, comb: &PackedHypervector, position: usize, window: usize) -> Result<HdLogits, DecodeError> {
    let dims = mem.dims();
    if position < 2 || position > dims.l_max {
        return Err(DecodeError::Position {
            position,
            l_max: dims.l_max,
        });
    }
    if window == 0 {
        return Err(DecodeError::Config("window must be at least 1".into()));
    }
    let beta = dims.beta as f64;
    let mut values = vec![f64::NEG_INFINITY; dims.vocab_size];
    let mut offsets = vec![0u32; dims.vocab_size];
    let last = (position + window - 1).min(dims.l_max);
    for (w, p) in (position..=last).enumerate() {
        let dist = hamming_batch(mem.slice(p)?, comb)?;
        for ((v, o), d) in values.iter_mut().zip(&mut offsets).zip(dist) {
            let score = beta - d as f64;
            if score > *v {
                *v = score;
                *o = w as u32;
            }
        }
    }
    Ok(HdLogits { values, offsets })
}

/// `hd / max(hd) + λ · norm(lm)`.
///
/// `norm(lm)` is `lm / max(lm)` when `max(lm) > 0`. Otherwise `lm` is
/// rescaled linearly onto `[0, 1]` (a constant vector becomes all ones), so
/// the maximum still maps to 1 and the result stays invariant to positive
/// rescaling of `lm`.
pub fn mix_logits(hd: &[f64], lm: &[f64], lambda: f64) -> Result<Vec<f64>, DecodeError> {
    if hd.len() != lm.len() {
        return Err(DecodeError::LengthMismatch { hd: hd.len(), lm: lm.len() });
    }
    let hd_max = hd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hd_max > 0.0) {
        return Err(DecodeError::NonPositiveHd(hd_max));
    }
    if lambda == 0.0 {
        return Ok(hd.iter().map(|h| h / hd_max).collect());
    }
    let lm_max = lm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lm_min = lm.iter().cloned().fold(f64::INFINITY, f64::min);
    let norm = |l: f64| -> f64 {
        if lm_max > 0.0 {
            l / lm_max
        } else if lm_max > lm_min {
            (l - lm_min) / (lm_max - lm_min)
        } else {
            1.0
        }
    };
    Ok(hd.iter().zip(lm).map(|(h, l)| h / hd_max + lambda * norm(*l)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    pub token: u32,
    pub hd_logit: f64,
    pub window_offset: u32,
    pub mixed: f64,
}

/// One line of the diagnostics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub schema_version: u32,
    pub step: usize,
    /// Position the chosen token occupies.
    pub position: usize,
    pub top: Vec<ScoredToken>,
    pub candidates: Candidates,
    pub clip_scores: Option<Vec<f64>>,
    pub combined: Vec<f64>,
    pub token: u32,
    pub finished: Option<FinishReason>,
}

/// Decoding state for one image.
#[derive(Debug, Clone)]
pub struct DecodeSession {
    tokens: Vec<u32>,
    prompt_len: usize,
    img_hv: Hypervector,
    image_embedding: Vec<f32>,
    finished: Option<FinishReason>,
    rng: ChaCha8Rng,
    full_stop: HashMap<u32, bool>,
}

impl DecodeSession {
    /// All tokens, prompt included.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    /// Index of the last token (1-based position).
    pub fn step(&self) -> usize {
        self.tokens.len()
    }

    pub fn finished(&self) -> Option<FinishReason> {
        self.finished
    }

    pub fn image_hypervector(&self) -> &Hypervector {
        &self.img_hv
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub generated: Vec<u32>,
    pub text: String,
    pub reason: FinishReason,
    pub steps: Vec<StepRecord>,
}

pub struct Decoder<'m> {
    mem: &'m PackedMemory,
    encoders: Encoders,
    config: DecodeConfig,
    sampler: SamplerConfig,
}

impl<'m> Decoder<'m> {
    /// Builds encoders from the seeds and encoder dims stored in `mem`.
    pub fn new(mem: &'m PackedMemory, config: DecodeConfig, sampler: SamplerConfig) -> Result<Self, DecodeError> {
        let header = mem.header();
        if !header.encoder.is_recorded() {
            return Err(DecodeError::Config("memory does not record encoder dimensions".into()));
        }
        let encoders = Encoders::new(&header.seeds, header.encoder, header.dims.beta)?;
        Self::with_encoders(mem, config, sampler, encoders)
    }

    pub fn with_encoders(
        mem: &'m PackedMemory,
        config: DecodeConfig,
        sampler: SamplerConfig,
        encoders: Encoders,
    ) -> Result<Self, DecodeError> {
        let dims = mem.dims();
        config.validate(dims.l_max, dims.vocab_size)?;
        sampler.validate()?;
        if encoders.image.beta() != dims.beta {
            return Err(DecodeError::Config("encoder β differs from memory β".into()));
        }
        Ok(Self {
            mem,
            encoders,
            config,
            sampler,
        })
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }

    pub fn encoders(&self) -> &Encoders {
        &self.encoders
    }

    pub fn start(&self, image: &PatchFeatures, provider: &mut dyn ModelProvider) -> Result<DecodeSession, DecodeError> {
        let vocab = provider.vocab_size();
        if vocab != self.mem.dims().vocab_size {
            return Err(DecodeError::Config(format!(
                "provider vocabulary {vocab} differs from memory vocabulary {}",
                self.mem.dims().vocab_size
            )));
        }
        let img_hv = self.encoders.image.encode(image)?;
        let image_embedding = if self.sampler.clip_weight > 0.0 {
            provider.pool_image(image)?
        } else {
            Vec::new()
        };
        Ok(DecodeSession {
            tokens: self.config.prompt.clone(),
            prompt_len: self.config.prompt.len(),
            img_hv,
            image_embedding,
            finished: None,
            rng: ChaCha8Rng::seed_from_u64(self.sampler.rng_seed),
            full_stop: HashMap::new(),
        })
    }

    fn limit_reached(&self, s: &DecodeSession) -> bool {
        s.generated().len() >= self.config.max_new_tokens || s.tokens.len() + 1 > self.mem.dims().l_max
    }

    /// Generates one token. Returns `None`, without calling the provider,
    /// when the length limit was already reached. On error the session is
    /// left unchanged.
    pub fn step(&self, s: &mut DecodeSession, provider: &mut dyn ModelProvider) -> Result<Option<StepRecord>, DecodeError> {
        if let Some(r) = s.finished {
            return Err(DecodeError::Finished(r));
        }
        if self.limit_reached(s) {
            s.finished = Some(FinishReason::MaxLen);
            return Ok(None);
        }
        let position = s.tokens.len() + 1;
        let out = provider.encode_tokens(&s.tokens)?;
        if out.hidden.rows() != s.tokens.len() || out.logits.len() != self.mem.dims().vocab_size {
            return Err(ProviderError::Protocol("encode_tokens returned the wrong shape".into()).into());
        }
        let cap = self.encoders.caption.encode_row(out.hidden.row(s.tokens.len() - 1))?;
        let comb = combine(&s.img_hv, &cap)?.pack();
        let hd = hd_logits(self.mem, &comb, position, self.config.window)?;
        let lm: Vec<f64> = out.logits.iter().map(|&x| x as f64).collect();
        let mixed = mix_logits(&hd.values, &lm, self.config.mix_weight)?;
        let cands = build_candidates(&mixed, &s.tokens, &self.sampler)?;
        let mut rng = s.rng.clone();
        let sel = select_token(&cands, &s.tokens, &s.image_embedding, provider, &self.sampler, &mut rng)?;
        let token = sel.token;
        let stop = if self.config.eos_tokens.contains(&token) {
            Some(FinishReason::Eos)
        } else if self.config.stop_on_full_stop && self.ends_sentence(s, token, provider)? {
            Some(FinishReason::FullStop)
        } else {
            None
        };
        // Commit.
        s.rng = rng;
        s.tokens.push(token);
        s.finished = stop.or_else(|| self.limit_reached(s).then_some(FinishReason::MaxLen));
        Ok(Some(StepRecord {
            schema_version: DIAGNOSTICS_SCHEMA_VERSION,
            step: s.generated().len(),
            position,
            top: top_entries(&hd, &mixed, self.config.diagnostics_top_k),
            candidates: cands,
            clip_scores: sel.clip_scores,
            combined: sel.combined,
            token,
            finished: s.finished,
        }))
    }

    fn ends_sentence(&self, s: &mut DecodeSession, token: u32, provider: &mut dyn ModelProvider) -> Result<bool, DecodeError> {
        if let Some(&b) = s.full_stop.get(&token) {
            return Ok(b);
        }
        let b = provider.detokenize(&[token])?.trim_end().ends_with('.');
        s.full_stop.insert(token, b);
        Ok(b)
    }

    /// Decodes to completion, writing one JSON line per step to
    /// `diagnostics` if given.
    pub fn decode(
        &self,
        image: &PatchFeatures,
        provider: &mut dyn ModelProvider,
        mut diagnostics: Option<&mut dyn Write>,
    ) -> Result<DecodeOutput, DecodeError> {
        let mut s = self.start(image, provider)?;
        let mut steps = Vec::new();
        while s.finished.is_none() {
            if let Some(rec) = self.step(&mut s, provider)? {
                if let Some(w) = diagnostics.as_mut() {
                    serde_json::to_writer(&mut **w, &rec).map_err(std::io::Error::from)?;
                    w.write_all(b"\n")?;
                }
                steps.push(rec);
            }
        }
        let text = provider.detokenize(&s.tokens)?;
        Ok(DecodeOutput {
            generated: s.generated().to_vec(),
            tokens: s.tokens,
            text,
            reason: s.finished.expect("loop ends when finished"),
            steps,
        })
    }
}

fn top_entries(hd: &HdLogits, mixed: &[f64], k: usize) -> Vec<ScoredToken> {
    let mut order: Vec<usize> = (0..mixed.len()).collect();
    order.sort_by(|&a, &b| mixed[b].total_cmp(&mixed[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|t| ScoredToken {
            token: t as u32,
            hd_logit: hd.values[t],
            window_offset: hd.offsets[t],
            mixed: mixed[t],
        })
        .collect()
}
