//! Frozen-model functionality behind traits: causal sequence encoding with
//! next-token logits, tokenization, image pooling and text embedding.
//!
//! Three implementations exist: [`synthetic::SyntheticModel`] (in-process and
//! deterministic), [`shard`] files for offline learning data, and
//! [`client::ModelServerClient`], which talks to a child process over the
//! [`protocol`] framing.

pub mod client;
pub mod protocol;
pub mod server;
pub mod shard;
pub mod synthetic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::PatchFeatures;
use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("server reported an error: {0}")]
    Remote(String),
    #[error("request timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("model server exited ({status}); stderr: {stderr}")]
    Exited { status: String, stderr: String },
    #[error("configuration mismatch: {0}")]
    Config(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("token id {token} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("invalid input: {0}")]
    Input(String),
}

/// Dimensions a provider advertises.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderDims {
    pub n_p: usize,
    pub d_i: usize,
    pub d_c: usize,
    pub vocab_size: usize,
    pub pooled_dims: usize,
    /// Whether pooled and text embeddings come out unit-normalized.
    pub normalized: bool,
}

impl ProviderDims {
    /// Checks advertised dims against what the engine was configured with.
    pub fn check_against(&self, expected: &ProviderDims) -> Result<(), ProviderError> {
        let pairs = [
            ("n_p", self.n_p, expected.n_p),
            ("d_I", self.d_i, expected.d_i),
            ("d_C", self.d_c, expected.d_c),
            ("vocab_size", self.vocab_size, expected.vocab_size),
            ("pooled_dims", self.pooled_dims, expected.pooled_dims),
        ];
        for (name, got, want) in pairs {
            if got != want {
                return Err(ProviderError::Config(format!(
                    "{name}: provider has {got}, engine expects {want}"
                )));
            }
        }
        Ok(())
    }
}

/// Output of one causal encoding pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    /// `n × d_C`, row `i` depends only on tokens `0..=i`.
    pub hidden: Matrix,
    /// Next-token logits for the last position, length `|V|`.
    pub logits: Vec<f32>,
}

pub trait SequenceEncoder {
    fn d_c(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn encode_tokens(&mut self, ids: &[u32]) -> Result<SequenceOutput, ProviderError>;
    fn tokenize(&mut self, text: &str) -> Result<Vec<u32>, ProviderError>;
    fn detokenize(&mut self, ids: &[u32]) -> Result<String, ProviderError>;
}

pub trait VisionEncoder {
    fn n_p(&self) -> usize;
    fn d_i(&self) -> usize;
    fn pooled_dims(&self) -> usize;
    /// Whole-image embedding used for similarity scoring.
    fn pool_image(&mut self, patches: &PatchFeatures) -> Result<Vec<f32>, ProviderError>;
}

pub trait TextEmbedder {
    fn embed_text(&mut self, text: &str) -> Result<Vec<f32>, ProviderError>;
}

/// Everything the decoder needs from the frozen models.
pub trait ModelProvider: SequenceEncoder + VisionEncoder + TextEmbedder {
    fn dims(&self) -> ProviderDims;
}

/// Checks that hidden row `i` is unchanged when any token after `i` is
/// replaced. Returns the first offending `(changed_token, row)`.
pub fn check_causality(enc: &mut dyn SequenceEncoder, ids: &[u32]) -> Result<Option<(usize, usize)>, ProviderError> {
    let vocab = enc.vocab_size() as u32;
    let base = enc.encode_tokens(ids)?;
    for j in 1..ids.len() {
        let mut changed = ids.to_vec();
        changed[j] = (changed[j] + 1) % vocab;
        let out = enc.encode_tokens(&changed)?;
        for i in 0..j {
            let same = base
                .hidden
                .row(i)
                .iter()
                .zip(out.hidden.row(i))
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(Some((j, i)));
            }
        }
    }
    Ok(None)
}
