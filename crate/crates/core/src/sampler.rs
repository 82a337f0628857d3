//! Candidate construction and image-guided re-ranking.
//!
//! Logits go through repetition penalty, temperature, top-k, softmax and
//! nucleus filtering. When more than one candidate survives, each is
//! scored by the similarity between the image embedding and the text
//! embedding of the caption it would produce; sharpened similarities are
//! blended with the candidate probabilities and the best blend wins.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::cosine;
use crate::providers::{ProviderError, SequenceEncoder, TextEmbedder};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("no finite logits to sample from")]
    NoCandidates,
    #[error("logit {index} is NaN")]
    NaN { index: usize },
    #[error("scorer failed: {0}")]
    Scorer(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// The lowest token id among equal best scores.
    #[default]
    LowestId,
    /// A seeded uniform draw among equal best scores.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub clip_weight: f64,
    /// Scale applied to similarities before their softmax.
    pub sharpen: f64,
    pub rng_seed: u64,
    /// Accepted for configuration compatibility; has no effect.
    pub min_candidates: usize,
    pub tie_break: TieBreak,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            repetition_penalty: 1.1,
            top_k: 80,
            top_p: 0.95,
            clip_weight: 0.5,
            sharpen: 2.0,
            rng_seed: 0,
            min_candidates: 1,
            tie_break: TieBreak::LowestId,
        }
    }
}

impl SamplerConfig {
    /// Plain argmax over the logits: no penalty, no nucleus, no re-ranking.
    pub fn greedy() -> Self {
        Self {
            repetition_penalty: 1.0,
            top_k: 1,
            top_p: 1.0,
            clip_weight: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::Config(m.to_string()));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.repetition_penalty > 0.0 && self.repetition_penalty.is_finite()) {
            return bad("repetition penalty must be positive");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.clip_weight) {
            return bad("clip_weight must lie in [0, 1]");
        }
        if !self.sharpen.is_finite() {
            return bad("sharpen must be finite");
        }
        Ok(())
    }
}

/// Surviving candidates, most probable first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidates {
    pub ids: Vec<u32>,
    pub probs: Vec<f64>,
}

impl Candidates {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Applies the repetition penalty to every distinct token in `history`:
/// positive logits are divided by it, negative ones multiplied.
pub fn apply_repetition_penalty(logits: &mut [f64], history: &[u32], penalty: f64) {
    let mut seen = vec![false; logits.len()];
    for &t in history {
        let t = t as usize;
        if t < logits.len() && !seen[t] {
            seen[t] = true;
            let l = &mut logits[t];
            if *l > 0.0 {
                *l /= penalty;
            } else {
                *l *= penalty;
            }
        }
    }
}

pub fn build_candidates(logits: &[f64], history: &[u32], cfg: &SamplerConfig) -> Result<Candidates, SamplerError> {
    cfg.validate()?;
    if let Some(index) = logits.iter().position(|l| l.is_nan()) {
        return Err(SamplerError::NaN { index });
    }
    let mut l = logits.to_vec();
    apply_repetition_penalty(&mut l, history, cfg.repetition_penalty);
    for x in &mut l {
        *x /= cfg.temperature;
    }
    let mut order: Vec<usize> = (0..l.len()).filter(|&i| l[i] > f64::NEG_INFINITY).collect();
    if order.is_empty() {
        return Err(SamplerError::NoCandidates);
    }
    order.sort_by(|&a, &b| l[b].total_cmp(&l[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k);
    let top = l[order[0]];
    if top == f64::INFINITY {
        // Only the infinite logits carry mass.
        order.retain(|&i| l[i] == f64::INFINITY);
        let p = 1.0 / order.len() as f64;
        return Ok(Candidates {
            probs: vec![p; order.len()],
            ids: order.into_iter().map(|i| i as u32).collect(),
        });
    }
    let weights: Vec<f64> = order.iter().map(|&i| (l[i] - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut keep = 0;
    let mut mass = 0.0;
    for p in &probs {
        keep += 1;
        mass += p;
        if mass >= cfg.top_p {
            break;
        }
    }
    let kept: f64 = probs[..keep].iter().sum();
    Ok(Candidates {
        ids: order[..keep].iter().map(|&i| i as u32).collect(),
        probs: probs[..keep].iter().map(|p| p / kept).collect(),
    })
}

/// Detokenization plus text embedding, as needed for re-ranking.
pub trait CandidateScorer {
    fn detokenize(&mut self, ids: &[u32]) -> Result<String, ProviderError>;
    fn embed_text(&mut self, text: &str) -> Result<Vec<f32>, ProviderError>;
}

impl<T: SequenceEncoder + TextEmbedder + ?Sized> CandidateScorer for T {
    fn detokenize(&mut self, ids: &[u32]) -> Result<String, ProviderError> {
        SequenceEncoder::detokenize(self, ids)
    }

    fn embed_text(&mut self, text: &str) -> Result<Vec<f32>, ProviderError> {
        TextEmbedder::embed_text(self, text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub token: u32,
    /// Sharpened similarity scores, when they were computed.
    pub clip_scores: Option<Vec<f64>>,
    pub hd_scores: Vec<f64>,
    pub combined: Vec<f64>,
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn argmax(ids: &[u32], scores: &[f64], tie: TieBreak, rng: &mut ChaCha8Rng) -> u32 {
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut tied: Vec<u32> = ids.iter().zip(scores).filter(|(_, &s)| s == best).map(|(&i, _)| i).collect();
    tied.sort_unstable();
    match tie {
        TieBreak::LowestId => tied[0],
        TieBreak::Random if tied.len() == 1 => tied[0],
        TieBreak::Random => tied[rng.gen_range(0..tied.len())],
    }
}

/// Picks one candidate. The scorer is not consulted when there is a single
/// candidate or when `clip_weight` is zero.
pub fn select_token<S: CandidateScorer + ?Sized>(
    cands: &Candidates,
    history: &[u32],
    image_embedding: &[f32],
    scorer: &mut S,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Selection, SamplerError> {
    if cands.is_empty() {
        return Err(SamplerError::NoCandidates);
    }
    let total: f64 = cands.probs.iter().sum();
    let hd_scores: Vec<f64> = cands.probs.iter().map(|p| p / total).collect();
    if cands.len() == 1 {
        return Ok(Selection {
            token: cands.ids[0],
            clip_scores: None,
            combined: hd_scores.clone(),
            hd_scores,
        });
    }
    let clip_scores = if cfg.clip_weight > 0.0 {
        let mut sims = Vec::with_capacity(cands.len());
        let mut seq = history.to_vec();
        seq.push(0);
        for &c in &cands.ids {
            *seq.last_mut().unwrap() = c;
            let text = scorer.detokenize(&seq)?;
            let emb = scorer.embed_text(&text)?;
            sims.push(cfg.sharpen * cosine(image_embedding, &emb));
        }
        Some(softmax(&sims))
    } else {
        None
    };
    let combined: Vec<f64> = match &clip_scores {
        Some(clip) => clip
            .iter()
            .zip(&hd_scores)
            .map(|(c, h)| cfg.clip_weight * c + (1.0 - cfg.clip_weight) * h)
            .collect(),
        None => hd_scores.clone(),
    };
    Ok(Selection {
        token: argmax(&cands.ids, &combined, cfg.tie_break, rng),
        clip_scores,
        hd_scores,
        combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    /// Scorer returning fixed embeddings per final token.
    struct Table {
        embeddings: Vec<Vec<f32>>,
        calls: usize,
    }

    impl CandidateScorer for Table {
        fn detokenize(&mut self, ids: &[u32]) -> Result<String, ProviderError> {
            Ok(ids.last().unwrap().to_string())
        }

        fn embed_text(&mut self, text: &str) -> Result<Vec<f32>, ProviderError> {
            self.calls += 1;
            Ok(self.embeddings[text.parse::<usize>().unwrap()].clone())
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn cfg() -> SamplerConfig {
        SamplerConfig {
            repetition_penalty: 1.0,
            top_p: 1.0,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn top_k_one_gives_a_single_certain_candidate() {
        let c = build_candidates(&[0.1, 3.0, 2.0], &[], &SamplerConfig { top_k: 1, ..cfg() }).unwrap();
        assert_eq!(c.ids, vec![1]);
        assert_eq!(c.probs, vec![1.0]);
    }

    #[test]
    fn top_p_one_keeps_the_whole_top_k() {
        let logits: Vec<f64> = (0..20).map(|i| i as f64 * 0.3).collect();
        let c = build_candidates(&logits, &[], &SamplerConfig { top_k: 7, ..cfg() }).unwrap();
        assert_eq!(c.ids, (13..20).rev().collect::<Vec<u32>>());
        assert!((c.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repetition_penalty_arithmetic() {
        let mut l = vec![2.2, -2.0, 1.0];
        apply_repetition_penalty(&mut l, &[0, 1, 0, 1], 1.1);
        assert!((l[0] - 2.0).abs() < 1e-12);
        assert!((l[1] + 2.2).abs() < 1e-12);
        assert_eq!(l[2], 1.0);
    }

    #[test]
    fn nucleus_is_inclusive() {
        // probabilities 0.5, 0.3, 0.2 (as logits of their logs)
        let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let c = build_candidates(&logits, &[], &SamplerConfig { top_p: 0.6, ..cfg() }).unwrap();
        assert_eq!(c.ids, vec![0, 1]);
        assert!((c.probs[0] - 0.625).abs() < 1e-12);
        let c = build_candidates(&logits, &[], &SamplerConfig { top_p: 0.5, ..cfg() }).unwrap();
        assert_eq!(c.ids, vec![0]);
        let c = build_candidates(&logits, &[], &SamplerConfig { top_p: 0.01, ..cfg() }).unwrap();
        assert_eq!(c.ids, vec![0]);
    }

    #[test]
    fn ties_and_infinities() {
        let c = build_candidates(&[1.0, 5.0, 5.0, f64::NEG_INFINITY], &[], &SamplerConfig { top_k: 2, ..cfg() }).unwrap();
        assert_eq!(c.ids, vec![1, 2]);
        let c = build_candidates(&[1.0, f64::NEG_INFINITY], &[], &SamplerConfig { top_k: 5, ..cfg() }).unwrap();
        assert_eq!(c.ids, vec![0]);
        assert!(matches!(
            build_candidates(&[f64::NEG_INFINITY; 3], &[], &cfg()),
            Err(SamplerError::NoCandidates)
        ));
        assert!(matches!(build_candidates(&[0.0, f64::NAN], &[], &cfg()), Err(SamplerError::NaN { index: 1 })));
    }

    #[test]
    fn config_validation() {
        for bad in [
            SamplerConfig { temperature: 0.0, ..cfg() },
            SamplerConfig { top_k: 0, ..cfg() },
            SamplerConfig { top_p: 0.0, ..cfg() },
            SamplerConfig { top_p: 1.5, ..cfg() },
            SamplerConfig { clip_weight: 1.5, ..cfg() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn two_candidate_blend_oracle() {
        // Candidate 0 matches the image; probabilities are equal.
        let image = vec![1.0f32, 0.0];
        let sims = [0.9f64, 0.1];
        let emb = |s: f64| vec![s as f32, (1.0 - s * s).sqrt() as f32];
        let mut table = Table {
            embeddings: vec![emb(sims[0]), emb(sims[1])],
            calls: 0,
        };
        let cands = Candidates {
            ids: vec![0, 1],
            probs: vec![0.5, 0.5],
        };
        let c = SamplerConfig { clip_weight: 0.5, ..cfg() };
        let sel = select_token(&cands, &[], &image, &mut table, &c, &mut rng()).unwrap();
        assert_eq!(sel.token, 0);
        let e = (2.0 * 0.9f64).exp() / ((2.0 * 0.9f64).exp() + (2.0 * 0.1f64).exp());
        let clip = sel.clip_scores.unwrap();
        assert!((clip[0] - e).abs() < 1e-6);
        assert!((sel.combined[0] - (0.5 * e + 0.25)).abs() < 1e-6);
    }

    #[test]
    fn blend_boundaries() {
        let image = vec![1.0f32, 0.0];
        let mut table = Table {
            embeddings: vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.6, 0.8]],
            calls: 0,
        };
        let cands = Candidates {
            ids: vec![0, 2, 1],
            probs: vec![0.6, 0.3, 0.1],
        };
        let pure_hd = SamplerConfig { clip_weight: 0.0, ..cfg() };
        let sel = select_token(&cands, &[], &image, &mut table, &pure_hd, &mut rng()).unwrap();
        assert_eq!(sel.token, 0);
        assert_eq!(table.calls, 0);
        let pure_clip = SamplerConfig { clip_weight: 1.0, ..cfg() };
        let sel = select_token(&cands, &[], &image, &mut table, &pure_clip, &mut rng()).unwrap();
        assert_eq!(sel.token, 1);
        let single = Candidates {
            ids: vec![2],
            probs: vec![1.0],
        };
        let calls = table.calls;
        assert_eq!(select_token(&single, &[], &image, &mut table, &pure_clip, &mut rng()).unwrap().token, 2);
        assert_eq!(table.calls, calls);
    }

    #[test]
    fn final_ties_break_to_lowest_id_or_seeded_draw() {
        let mut table = Table { embeddings: vec![], calls: 0 };
        let cands = Candidates {
            ids: vec![7, 3, 5],
            probs: vec![0.4, 0.4, 0.2],
        };
        let c = SamplerConfig { clip_weight: 0.0, ..cfg() };
        assert_eq!(select_token(&cands, &[], &[], &mut table, &c, &mut rng()).unwrap().token, 3);
        let r = SamplerConfig { tie_break: TieBreak::Random, ..c };
        let picks: Vec<u32> = (0..40)
            .map(|s| select_token(&cands, &[], &[], &mut table, &r, &mut ChaCha8Rng::seed_from_u64(s)).unwrap().token)
            .collect();
        assert!(picks.contains(&3) && picks.contains(&7) && !picks.contains(&5));
        let again: Vec<u32> = (0..40)
            .map(|s| select_token(&cands, &[], &[], &mut table, &r, &mut ChaCha8Rng::seed_from_u64(s)).unwrap().token)
            .collect();
        assert_eq!(picks, again);
    }

    proptest! {
        #[test]
        fn raising_top_k_never_removes_candidates(
            logits in proptest::collection::vec(-10.0f64..10.0, 1..60),
            k in 1usize..30,
            p in 0.05f64..=1.0,
        ) {
            let base = SamplerConfig { top_k: k, top_p: 1.0, ..cfg() };
            let a = build_candidates(&logits, &[], &base).unwrap();
            let b = build_candidates(&logits, &[], &SamplerConfig { top_k: k + 5, ..base.clone() }).unwrap();
            prop_assert!(a.ids.iter().all(|i| b.ids.contains(i)));
            let n = build_candidates(&logits, &[0, 1], &SamplerConfig { top_p: p, ..base }).unwrap();
            prop_assert!((n.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(!n.is_empty());
        }
    }
}
