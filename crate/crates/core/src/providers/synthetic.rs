//! A deterministic stand-in for the frozen models, plus a generator for toy
//! captioning worlds.
//!
//! Token embeddings are seeded Gaussians, unit-normalized; declared synonym
//! pairs are placed at an exact cosine. Hidden state `i` is
//! `M · mean(E[t_0..=t_i])`, so it is causal by construction. Next-token
//! logits are `⟨E[v], R · h_last⟩`. Images pool to `normalize(P_I · mean z)`
//! and texts embed to `normalize(P_T · mean E)`.
//!
//! A world is a set of caption templates sharing a prefix. Every template
//! has its own patch-feature cluster centers; images are those centers plus
//! Gaussian noise.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::shard::{ShardError, ShardWriter};
use super::{ModelProvider, ProviderDims, ProviderError, SequenceEncoder, SequenceOutput, TextEmbedder, VisionEncoder};
use crate::encoders::PatchFeatures;
use crate::learner::LearnRecord;
use crate::matrix::Matrix;
use crate::protomem::EncoderDims;
use crate::rng::{counter_rng, fill_gaussian};

const DOMAIN_EMBED: u64 = 0x5359_4e5f_454d_4244;
const DOMAIN_MIX: u64 = 0x5359_4e5f_4d49_5800;
const DOMAIN_LOGIT: u64 = 0x5359_4e5f_4c4f_4749;
const DOMAIN_POOL_IMAGE: u64 = 0x5359_4e5f_504f_4f49;
const DOMAIN_POOL_TEXT: u64 = 0x5359_4e5f_504f_4f54;
const DOMAIN_CENTER_SHARED: u64 = 0x5359_4e5f_4353_4844;
const DOMAIN_CENTER_TEMPLATE: u64 = 0x5359_4e5f_4354_4d50;
const DOMAIN_NOISE: u64 = 0x5359_4e5f_4e4f_4953;

pub const EOS: &str = "<eos>";
pub const FULL_STOP: &str = ".";
pub const EOS_ID: u32 = 0;
pub const FULL_STOP_ID: u32 = 1;

/// Word-level vocabulary: `<eos>`, `.`, the listed words in order, then
/// `tok{n}` fillers up to the requested size.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(words: &[String], size: usize) -> Result<Self, ProviderError> {
        let mut list: Vec<String> = vec![EOS.to_string(), FULL_STOP.to_string()];
        let mut index: HashMap<String, u32> = list.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        for w in words {
            if !index.contains_key(w) {
                index.insert(w.clone(), list.len() as u32);
                list.push(w.clone());
            }
        }
        if list.len() > size {
            return Err(ProviderError::Config(format!(
                "{} distinct words do not fit a vocabulary of {size}",
                list.len()
            )));
        }
        let mut n = 0usize;
        while list.len() < size {
            let w = format!("tok{n}");
            n += 1;
            if index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), list.len() as u32);
            list.push(w);
        }
        Ok(Self { words: list, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Lowercases and splits on whitespace; a trailing `.` becomes its own
    /// token.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, ProviderError> {
        let mut ids = Vec::new();
        for raw in text.split_whitespace() {
            let w = raw.to_lowercase();
            let (stem, stop) = match w.strip_suffix('.') {
                Some(s) if !s.is_empty() => (s.to_string(), true),
                _ => (w, false),
            };
            ids.push(self.id(&stem).ok_or(ProviderError::UnknownWord(stem))?);
            if stop {
                ids.push(FULL_STOP_ID);
            }
        }
        Ok(ids)
    }

    /// Joins words with spaces; `.` attaches to the previous word and
    /// `<eos>` renders as nothing.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String, ProviderError> {
        let mut out = String::new();
        for &id in ids {
            let w = self.word(id).ok_or(ProviderError::TokenOutOfRange {
                token: id,
                vocab_size: self.len(),
            })?;
            if id == EOS_ID {
                continue;
            }
            if !out.is_empty() && id != FULL_STOP_ID {
                out.push(' ');
            }
            out.push_str(w);
        }
        Ok(out)
    }
}

fn default_synonym_cosine() -> f64 {
    0.95
}

/// Everything that determines a [`SyntheticModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub seed: u64,
    pub n_p: usize,
    pub d_i: usize,
    pub d_c: usize,
    /// Width of the token-embedding table.
    pub d_e: usize,
    pub pooled_dims: usize,
    pub vocab_size: usize,
    /// Named words, in id order after `<eos>` and `.`.
    pub words: Vec<String>,
    #[serde(default)]
    pub synonyms: Vec<(String, String)>,
    #[serde(default = "default_synonym_cosine")]
    pub synonym_cosine: f64,
    /// Word pairs `(a, b)` where `b` may follow `a`. The logit of every
    /// such `b` gets [`BIGRAM_BOOST`] after `a`, standing in for the
    /// grammar a real language model knows.
    #[serde(default)]
    pub bigrams: Vec<(String, String)>,
}

pub const BIGRAM_BOOST: f64 = 1.0;

impl ModelSpec {
    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            n_p: self.n_p,
            d_i: self.d_i,
            d_c: self.d_c,
        }
    }
}

fn gaussian_rows(seed: u64, domain: u64, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    let mut buf = vec![0f32; cols];
    for r in 0..rows {
        fill_gaussian(&mut counter_rng(seed, domain, r as u64), &mut buf);
        out.extend(buf.iter().map(|&x| x as f64 * scale));
    }
    out
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `m (rows × cols) · x`.
fn matvec(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    m.chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    spec: ModelSpec,
    vocab: Vocabulary,
    embed: Vec<f64>,
    mix: Vec<f64>,
    logit: Vec<f64>,
    pool_image: Vec<f64>,
    pool_text: Vec<f64>,
    /// Successor ids per token id.
    successors: Vec<Vec<u32>>,
}

impl SyntheticModel {
    pub fn new(spec: ModelSpec) -> Result<Self, ProviderError> {
        let dims = [spec.n_p, spec.d_i, spec.d_c, spec.d_e, spec.pooled_dims, spec.vocab_size];
        if dims.contains(&0) {
            return Err(ProviderError::Config("model dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&spec.synonym_cosine) {
            return Err(ProviderError::Config("synonym cosine must lie in [0, 1]".into()));
        }
        let vocab = Vocabulary::new(&spec.words, spec.vocab_size)?;
        let d_e = spec.d_e;
        let mut embed = gaussian_rows(spec.seed, DOMAIN_EMBED, vocab.len(), d_e, 1.0);
        for row in embed.chunks_exact_mut(d_e) {
            normalize(row);
        }
        for (a, b) in &spec.synonyms {
            let ia = vocab.id(a).ok_or_else(|| ProviderError::UnknownWord(a.clone()))? as usize;
            let ib = vocab.id(b).ok_or_else(|| ProviderError::UnknownWord(b.clone()))? as usize;
            let ea = embed[ia * d_e..(ia + 1) * d_e].to_vec();
            let eb = &mut embed[ib * d_e..(ib + 1) * d_e];
            let proj: f64 = ea.iter().zip(eb.iter()).map(|(x, y)| x * y).sum();
            eb.iter_mut().zip(&ea).for_each(|(y, x)| *y -= proj * x);
            normalize(eb);
            let c = spec.synonym_cosine;
            let s = (1.0 - c * c).sqrt();
            eb.iter_mut().zip(&ea).for_each(|(y, x)| *y = c * x + s * *y);
        }
        let mix = gaussian_rows(spec.seed, DOMAIN_MIX, spec.d_c, d_e, 1.0 / (d_e as f64).sqrt());
        let logit = gaussian_rows(spec.seed, DOMAIN_LOGIT, d_e, spec.d_c, 1.0 / (spec.d_c as f64).sqrt());
        let pool_image = gaussian_rows(spec.seed, DOMAIN_POOL_IMAGE, spec.pooled_dims, spec.d_i, 1.0);
        let pool_text = gaussian_rows(spec.seed, DOMAIN_POOL_TEXT, spec.pooled_dims, d_e, 1.0);
        let mut successors = vec![Vec::new(); vocab.len()];
        for (a, b) in &spec.bigrams {
            let ia = vocab.id(a).ok_or_else(|| ProviderError::UnknownWord(a.clone()))?;
            let ib = vocab.id(b).ok_or_else(|| ProviderError::UnknownWord(b.clone()))?;
            if !successors[ia as usize].contains(&ib) {
                successors[ia as usize].push(ib);
            }
        }
        Ok(Self {
            spec,
            vocab,
            embed,
            mix,
            logit,
            pool_image,
            pool_text,
            successors,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn embedding(&self, id: u32) -> &[f64] {
        let d = self.spec.d_e;
        &self.embed[id as usize * d..(id as usize + 1) * d]
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ProviderError> {
        match ids.iter().find(|&&t| t as usize >= self.vocab.len()) {
            Some(&token) => Err(ProviderError::TokenOutOfRange {
                token,
                vocab_size: self.vocab.len(),
            }),
            None => Ok(()),
        }
    }

    /// Caption hidden states only, skipping the logits.
    pub fn hidden_states(&self, ids: &[u32]) -> Result<Matrix, ProviderError> {
        Ok(self.forward(ids, false)?.0)
    }

    fn forward(&self, ids: &[u32], with_logits: bool) -> Result<(Matrix, Vec<f32>), ProviderError> {
        if ids.is_empty() {
            return Err(ProviderError::Input("empty token sequence".into()));
        }
        self.check_ids(ids)?;
        let d_e = self.spec.d_e;
        let mut sum = vec![0f64; d_e];
        let mut hidden = Vec::with_capacity(ids.len() * self.spec.d_c);
        let mut last = Vec::new();
        for (i, &t) in ids.iter().enumerate() {
            sum.iter_mut().zip(self.embedding(t)).for_each(|(s, e)| *s += e);
            let mean: Vec<f64> = sum.iter().map(|s| s / (i + 1) as f64).collect();
            last = matvec(&self.mix, d_e, &mean);
            hidden.extend(last.iter().map(|&h| h as f32));
        }
        let hidden = Matrix::new(ids.len(), self.spec.d_c, hidden).expect("hidden shape");
        let logits = if with_logits {
            let q = matvec(&self.logit, self.spec.d_c, &last);
            let mut logits: Vec<f64> = self
                .embed
                .chunks_exact(d_e)
                .map(|e| e.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            for &b in &self.successors[*ids.last().expect("non-empty") as usize] {
                logits[b as usize] += BIGRAM_BOOST;
            }
            logits.into_iter().map(|l| l as f32).collect()
        } else {
            Vec::new()
        };
        Ok((hidden, logits))
    }
}

impl SequenceEncoder for SyntheticModel {
    fn d_c(&self) -> usize {
        self.spec.d_c
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn encode_tokens(&mut self, ids: &[u32]) -> Result<SequenceOutput, ProviderError> {
        let (hidden, logits) = self.forward(ids, true)?;
        Ok(SequenceOutput { hidden, logits })
    }

    fn tokenize(&mut self, text: &str) -> Result<Vec<u32>, ProviderError> {
        self.vocab.tokenize(text)
    }

    fn detokenize(&mut self, ids: &[u32]) -> Result<String, ProviderError> {
        self.vocab.detokenize(ids)
    }
}

impl VisionEncoder for SyntheticModel {
    fn n_p(&self) -> usize {
        self.spec.n_p
    }

    fn d_i(&self) -> usize {
        self.spec.d_i
    }

    fn pooled_dims(&self) -> usize {
        self.spec.pooled_dims
    }

    fn pool_image(&mut self, patches: &PatchFeatures) -> Result<Vec<f32>, ProviderError> {
        if patches.n_p() != self.spec.n_p || patches.d_i() != self.spec.d_i {
            return Err(ProviderError::Input(format!(
                "image is {}x{}, model expects {}x{}",
                patches.n_p(),
                patches.d_i(),
                self.spec.n_p,
                self.spec.d_i
            )));
        }
        let mut mean = vec![0f64; self.spec.d_i];
        for row in patches.matrix().iter_rows() {
            mean.iter_mut().zip(row).for_each(|(m, &x)| *m += x as f64);
        }
        let mut pooled = matvec(&self.pool_image, self.spec.d_i, &mean);
        normalize(&mut pooled);
        Ok(pooled.into_iter().map(|x| x as f32).collect())
    }
}

impl TextEmbedder for SyntheticModel {
    fn embed_text(&mut self, text: &str) -> Result<Vec<f32>, ProviderError> {
        let ids = self.vocab.tokenize(text)?;
        let mut mean = vec![0f64; self.spec.d_e];
        for &t in &ids {
            mean.iter_mut().zip(self.embedding(t)).for_each(|(m, e)| *m += e);
        }
        let mut out = matvec(&self.pool_text, self.spec.d_e, &mean);
        normalize(&mut out);
        Ok(out.into_iter().map(|x| x as f32).collect())
    }
}

impl ModelProvider for SyntheticModel {
    fn dims(&self) -> ProviderDims {
        ProviderDims {
            n_p: self.spec.n_p,
            d_i: self.spec.d_i,
            d_c: self.spec.d_c,
            vocab_size: self.vocab.len(),
            pooled_dims: self.spec.pooled_dims,
            normalized: true,
        }
    }
}

fn default_shared_fraction() -> f64 {
    0.5
}

/// Parameters of a toy captioning world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub prefix: String,
    /// Caption bodies; each is appended to the prefix.
    pub templates: Vec<String>,
    #[serde(default)]
    pub synonyms: Vec<(String, String)>,
    pub train_per_template: usize,
    pub heldout_per_template: usize,
    pub n_p: usize,
    pub d_i: usize,
    pub d_c: usize,
    pub d_e: usize,
    pub pooled_dims: usize,
    pub vocab_size: usize,
    /// Per-component standard deviation of image noise around the centers.
    pub sigma: f64,
    /// Variance share of the patch centers common to every template.
    #[serde(default = "default_shared_fraction")]
    pub shared_fraction: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            prefix: "this image shows".into(),
            templates: vec!["new car on road .".into(), "new car on snow .".into()],
            synonyms: vec![("new".into(), "latest".into())],
            train_per_template: 50,
            heldout_per_template: 20,
            n_p: 16,
            d_i: 64,
            d_c: 64,
            d_e: 64,
            pooled_dims: 32,
            vocab_size: 64,
            sigma: 0.5,
            shared_fraction: default_shared_fraction(),
        }
    }
}

/// Contents of `world.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldManifest {
    pub spec: WorldSpec,
    pub model: ModelSpec,
    pub prefix_ids: Vec<u32>,
    pub template_ids: Vec<Vec<u32>>,
    pub train_shard: PathBuf,
    pub heldout_shard: PathBuf,
}

impl WorldManifest {
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))
    }
}

pub const WORLD_FILE: &str = "world.json";
pub const TRAIN_SHARD: &str = "train.hdsh";
pub const HELDOUT_SHARD: &str = "heldout/heldout.hdsh";

/// Which split an image belongs to; the two use disjoint noise streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone)]
pub struct World {
    spec: WorldSpec,
    model: SyntheticModel,
    prefix_ids: Vec<u32>,
    template_ids: Vec<Vec<u32>>,
    centers: Vec<Vec<f32>>,
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self, ProviderError> {
        if spec.templates.is_empty() {
            return Err(ProviderError::Config("a world needs at least one template".into()));
        }
        if !(0.0..=1.0).contains(&spec.shared_fraction) || spec.sigma < 0.0 {
            return Err(ProviderError::Config("shared_fraction must lie in [0, 1] and sigma be non-negative".into()));
        }
        let mut words = Vec::new();
        let texts = std::iter::once(&spec.prefix).chain(&spec.templates);
        for text in texts {
            for w in text.split_whitespace() {
                let w = w.to_lowercase();
                let w = match w.strip_suffix('.') {
                    Some(s) if !s.is_empty() => s.to_string(),
                    _ => w,
                };
                words.push(w);
            }
        }
        for (a, b) in &spec.synonyms {
            words.push(a.to_lowercase());
            words.push(b.to_lowercase());
        }
        let model_spec = ModelSpec {
            seed: spec.seed,
            n_p: spec.n_p,
            d_i: spec.d_i,
            d_c: spec.d_c,
            d_e: spec.d_e,
            pooled_dims: spec.pooled_dims,
            vocab_size: spec.vocab_size,
            words,
            synonyms: spec.synonyms.clone(),
            synonym_cosine: default_synonym_cosine(),
            bigrams: caption_bigrams(&spec),
        };
        let model = SyntheticModel::new(model_spec)?;
        let prefix_ids = model.vocab.tokenize(&spec.prefix)?;
        if prefix_ids.is_empty() {
            return Err(ProviderError::Config("prefix must contain at least one word".into()));
        }
        let mut template_ids = Vec::new();
        for t in &spec.templates {
            let mut ids = prefix_ids.clone();
            ids.extend(model.vocab.tokenize(t)?);
            if template_ids.contains(&ids) {
                return Err(ProviderError::Config(format!("duplicate template {t:?}")));
            }
            template_ids.push(ids);
        }
        let shared = gaussian_rows(spec.seed, DOMAIN_CENTER_SHARED, spec.n_p, spec.d_i, 1.0);
        let a = spec.shared_fraction.sqrt();
        let b = (1.0 - spec.shared_fraction).sqrt();
        let centers = (0..spec.templates.len())
            .map(|t| {
                let own = gaussian_rows(
                    derive_template_seed(spec.seed, t),
                    DOMAIN_CENTER_TEMPLATE,
                    spec.n_p,
                    spec.d_i,
                    1.0,
                );
                shared.iter().zip(&own).map(|(s, o)| (a * s + b * o) as f32).collect()
            })
            .collect();
        Ok(Self {
            spec,
            model,
            prefix_ids,
            template_ids,
            centers,
        })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn model(&self) -> &SyntheticModel {
        &self.model
    }

    pub fn prefix_ids(&self) -> &[u32] {
        &self.prefix_ids
    }

    /// Full token ids (prefix included) of each template.
    pub fn template_ids(&self) -> &[Vec<u32>] {
        &self.template_ids
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        self.model.spec.encoder_dims()
    }

    /// Patch features of image `index` of template `template`.
    pub fn image(&self, template: usize, split: Split, index: usize) -> PatchFeatures {
        let global = match split {
            Split::Train => index,
            Split::Heldout => self.spec.train_per_template + index,
        };
        let (n_p, d_i) = (self.spec.n_p, self.spec.d_i);
        let mut noise = vec![0f32; n_p * d_i];
        let stream = ((template as u64) << 32) | global as u64;
        fill_gaussian(&mut counter_rng(self.spec.seed, DOMAIN_NOISE, stream), &mut noise);
        let sigma = self.spec.sigma as f32;
        let data = self.centers[template]
            .iter()
            .zip(&noise)
            .map(|(c, n)| c + sigma * n)
            .collect();
        PatchFeatures(Matrix::new(n_p, d_i, data).expect("patch shape"))
    }

    pub fn record(&self, template: usize, split: Split, index: usize) -> LearnRecord {
        let ids = self.template_ids[template].clone();
        let hidden = self.model.hidden_states(&ids).expect("template ids are in vocabulary");
        LearnRecord {
            patches: self.image(template, split, index),
            token_ids: ids,
            hidden,
        }
    }

    /// Records in shard order: image index major, template minor.
    pub fn records(&self, split: Split) -> impl Iterator<Item = (usize, LearnRecord)> + '_ {
        let n = match split {
            Split::Train => self.spec.train_per_template,
            Split::Heldout => self.spec.heldout_per_template,
        };
        let k = self.template_ids.len();
        (0..n * k).map(move |i| (i % k, self.record(i % k, split, i / k)))
    }

    pub fn manifest(&self) -> WorldManifest {
        WorldManifest {
            spec: self.spec.clone(),
            model: self.model.spec.clone(),
            prefix_ids: self.prefix_ids.clone(),
            template_ids: self.template_ids.clone(),
            train_shard: PathBuf::from(TRAIN_SHARD),
            heldout_shard: PathBuf::from(HELDOUT_SHARD),
        }
    }

    /// Writes `train.hdsh`, `heldout/heldout.hdsh` and `world.json`.
    pub fn write(&self, dir: &Path) -> Result<WorldManifest, ShardError> {
        fs::create_dir_all(dir.join("heldout")).map_err(ShardError::Io)?;
        for (split, name) in [(Split::Train, TRAIN_SHARD), (Split::Heldout, HELDOUT_SHARD)] {
            let mut w = ShardWriter::create(&dir.join(name), self.encoder_dims())?;
            for (_, rec) in self.records(split) {
                w.write_record(&rec)?;
            }
            w.finish()?;
        }
        let manifest = self.manifest();
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join(WORLD_FILE), json + "\n").map_err(ShardError::Io)?;
        Ok(manifest)
    }
}

/// Consecutive word pairs of every caption, synonyms substituted both ways.
fn caption_bigrams(spec: &WorldSpec) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for t in &spec.templates {
        let text = format!("{} {t}", spec.prefix).to_lowercase();
        let words: Vec<String> = text
            .split_whitespace()
            .flat_map(|w| match w.strip_suffix('.') {
                Some(s) if !s.is_empty() => vec![s.to_string(), FULL_STOP.to_string()],
                _ => vec![w.to_string()],
            })
            .collect();
        for pair in words.windows(2) {
            let variants = |w: &String| {
                let mut v = vec![w.clone()];
                for (a, b) in &spec.synonyms {
                    if w == &a.to_lowercase() {
                        v.push(b.to_lowercase());
                    } else if w == &b.to_lowercase() {
                        v.push(a.to_lowercase());
                    }
                }
                v
            };
            for a in variants(&pair[0]) {
                for b in variants(&pair[1]) {
                    if !out.contains(&(a.clone(), b.clone())) {
                        out.push((a.clone(), b));
                    }
                }
            }
        }
    }
    out
}

fn derive_template_seed(seed: u64, template: usize) -> u64 {
    crate::rng::derive_seed(seed, 0x1000 + template as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::cosine;
    use crate::providers::check_causality;

    fn small_world() -> World {
        World::new(WorldSpec {
            train_per_template: 3,
            heldout_per_template: 2,
            ..WorldSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn logits_favour_caption_continuations() {
        let world = World::new(WorldSpec::default()).unwrap();
        let mut m = world.model().clone();
        let ids = m.tokenize("this image shows latest car on").unwrap();
        let logits = m.encode_tokens(&ids).unwrap().logits;
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        let top: Vec<&str> = order[..2].iter().map(|&t| m.vocabulary().word(t as u32).unwrap()).collect();
        assert!(top.contains(&"road") && top.contains(&"snow"), "{top:?}");
        assert!(world.model().spec().bigrams.contains(&("latest".into(), "car".into())));
    }

    #[test]
    fn vocabulary_layout() {
        let w = small_world();
        let v = w.model().vocabulary();
        assert_eq!(v.word(0), Some("<eos>"));
        assert_eq!(v.word(1), Some("."));
        assert_eq!(v.word(2), Some("this"));
        assert_eq!(v.len(), 64);
        assert_eq!(v.word(63).unwrap(), "tok52");
        let ids = v.tokenize("This image shows new car on Road.").unwrap();
        assert_eq!(ids.last(), Some(&FULL_STOP_ID));
        assert_eq!(v.detokenize(&ids).unwrap(), "this image shows new car on road.");
        assert_eq!(v.detokenize(&[2, 0]).unwrap(), "this");
        assert!(matches!(v.tokenize("zebra"), Err(ProviderError::UnknownWord(_))));
    }

    #[test]
    fn synonyms_sit_at_the_declared_cosine() {
        let w = small_world();
        let m = w.model();
        let a = m.embedding(m.vocab.id("new").unwrap());
        let b = m.embedding(m.vocab.id("latest").unwrap());
        let c: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        assert!((c - 0.95).abs() < 1e-12, "{c}");
    }

    #[test]
    fn hidden_states_are_causal_prefix_means() {
        let mut m = small_world().model().clone();
        let ids = m.tokenize("this image shows new car on road .").unwrap();
        assert_eq!(check_causality(&mut m, &ids).unwrap(), None);
        let out = m.encode_tokens(&ids).unwrap();
        assert_eq!(out.hidden.rows(), ids.len());
        assert_eq!(out.logits.len(), 64);
        // Repeating a token leaves the running mean (and so the state) fixed.
        let rep = m.encode_tokens(&[5, 5, 5]).unwrap();
        assert!(cosine(rep.hidden.row(0), rep.hidden.row(2)) > 1.0 - 1e-6);
    }

    #[test]
    fn images_cluster_by_template() {
        let w = small_world();
        let flat = |p: PatchFeatures| p.0.into_vec();
        let a0 = flat(w.image(0, Split::Train, 0));
        let a1 = flat(w.image(0, Split::Heldout, 0));
        let b0 = flat(w.image(1, Split::Train, 0));
        assert!(cosine(&a0, &a1) > cosine(&a0, &b0) + 0.2);
        assert_ne!(a0, flat(w.image(0, Split::Train, 1)));
    }

    #[test]
    fn pooled_and_text_embeddings_are_unit() {
        let w = small_world();
        let mut m = w.model().clone();
        let p = m.pool_image(&w.image(0, Split::Train, 0)).unwrap();
        let t = m.embed_text("new car on road.").unwrap();
        for v in [p, t] {
            assert_eq!(v.len(), 32);
            assert!((crate::matrix::norm(&v) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn degenerate_templates_are_rejected() {
        let spec = WorldSpec {
            templates: vec!["car .".into(), "car .".into()],
            ..WorldSpec::default()
        };
        assert!(matches!(World::new(spec), Err(ProviderError::Config(_))));
    }

    #[test]
    fn record_order_interleaves_templates() {
        let w = small_world();
        let recs: Vec<_> = w.records(Split::Train).collect();
        assert_eq!(recs.len(), 6);
        assert_eq!(recs.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(recs[0].1.token_ids.len(), 8);
    }
}
