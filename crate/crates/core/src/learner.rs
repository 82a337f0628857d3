//! Single-pass prototype learning.
//!
//! For every record, the image hypervector is bound to the caption
//! hypervector at each context position and added to the prototype row of
//! the token that follows. Records are absorbed in source order and the
//! memory is checkpointed every `flush_batch` records, so an interrupted run
//! resumes from `records_consumed` and ends bit-identical to an
//! uninterrupted one.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{combine, EncodeError, Encoders, PatchFeatures};
use crate::matrix::Matrix;
use crate::protomem::{AccumMemory, EncoderDims, MemoryError};

pub const DEFAULT_FLUSH_BATCH: usize = 512;
pub const DEFAULT_ENCODE_BATCH: usize = 16;

/// One image–caption pair with its frozen-model features.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnRecord {
    pub patches: PatchFeatures,
    /// Caption token ids, prefix first.
    pub token_ids: Vec<u32>,
    /// Causal hidden states, one row per token.
    pub hidden: Matrix,
}

impl LearnRecord {
    /// Cuts the caption to its first `n` tokens.
    pub fn truncate(&mut self, n: usize) {
        if self.token_ids.len() > n {
            self.token_ids.truncate(n);
            self.hidden = self.hidden.truncated(n);
        }
    }
}

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("record {index}: {reason}")]
    Malformed { index: u64, reason: String },
    #[error("record source i/o: {0}")]
    Io(String),
}

/// A seekable, ordered stream of records.
pub trait RecordSource {
    /// Total records, if known.
    fn len(&self) -> Option<u64>;
    /// Positions the source so the next record returned is `index`.
    fn seek(&mut self, index: u64) -> Result<(), SourceError>;
    fn next_record(&mut self) -> Option<Result<LearnRecord, SourceError>>;
}

/// In-memory source, mostly for tests.
#[derive(Debug, Clone, Default)]
pub struct VecSource {
    records: Vec<LearnRecord>,
    cursor: usize,
}

impl VecSource {
    pub fn new(records: Vec<LearnRecord>) -> Self {
        Self { records, cursor: 0 }
    }
}

impl RecordSource for VecSource {
    fn len(&self) -> Option<u64> {
        Some(self.records.len() as u64)
    }

    fn seek(&mut self, index: u64) -> Result<(), SourceError> {
        self.cursor = (index as usize).min(self.records.len());
        Ok(())
    }

    fn next_record(&mut self) -> Option<Result<LearnRecord, SourceError>> {
        let r = self.records.get(self.cursor).cloned();
        self.cursor += 1;
        r.map(Ok)
    }
}

/// Several sources read back to back, indexed globally.
pub struct ChainSource {
    sources: Vec<Box<dyn RecordSource>>,
    lens: Vec<u64>,
    current: usize,
}

impl ChainSource {
    pub fn new(sources: Vec<Box<dyn RecordSource>>) -> Result<Self, SourceError> {
        let lens = sources
            .iter()
            .map(|s| s.len().ok_or_else(|| SourceError::Io("chained sources need known lengths".into())))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            sources,
            lens,
            current: 0,
        })
    }
}

impl RecordSource for ChainSource {
    fn len(&self) -> Option<u64> {
        Some(self.lens.iter().sum())
    }

    fn seek(&mut self, mut index: u64) -> Result<(), SourceError> {
        self.current = self.sources.len();
        for (i, &n) in self.lens.iter().enumerate() {
            if index < n {
                self.current = i;
                self.sources[i].seek(index)?;
                for s in &mut self.sources[i + 1..] {
                    s.seek(0)?;
                }
                return Ok(());
            }
            index -= n;
        }
        Ok(())
    }

    fn next_record(&mut self) -> Option<Result<LearnRecord, SourceError>> {
        while self.current < self.sources.len() {
            if let Some(r) = self.sources[self.current].next_record() {
                return Some(r);
            }
            self.current += 1;
        }
        None
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedPolicy {
    /// Log the record and move on; it still counts as consumed.
    #[default]
    Skip,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    /// Leading token ids every caption is expected to start with. Targets
    /// start right after it. Empty means a one-token prefix of any value.
    pub prefix: Vec<u32>,
    pub flush_batch: usize,
    /// Captions longer than this are cut. Defaults to `l_max`.
    pub truncation: Option<usize>,
    pub malformed: MalformedPolicy,
    /// Records whose images are projected together.
    pub encode_batch: usize,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            prefix: Vec::new(),
            flush_batch: DEFAULT_FLUSH_BATCH,
            truncation: None,
            malformed: MalformedPolicy::Skip,
            encode_batch: DEFAULT_ENCODE_BATCH,
        }
    }
}

#[derive(Debug, Error)]
pub enum LearnError {
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("record {index}: {reason}")]
    Malformed { index: u64, reason: String },
    #[error("record source: {0}")]
    Source(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnSummary {
    /// Records absorbed (or skipped) in this run.
    pub records: u64,
    pub skipped: u64,
    /// Accumulate calls made.
    pub tokens: u64,
    /// Records consumed in total, including earlier runs.
    pub records_consumed: u64,
    pub duration: Duration,
}

/// Per-run knobs that are not part of the learning configuration.
#[derive(Debug, Clone, Copy, Default)]
pub struct LearnOptions {
    /// Stop once this many records have been consumed in total, leaving
    /// anything past the last checkpoint unflushed, as a killed process
    /// would.
    pub halt_after: Option<u64>,
}

pub struct Learner {
    encoders: Encoders,
    config: LearnConfig,
    l_max: usize,
    vocab_size: usize,
    dims: EncoderDims,
}

impl Learner {
    /// Builds encoders from the seeds and encoder dims stored in `mem`.
    pub fn new(mem: &AccumMemory, config: LearnConfig) -> Result<Self, LearnError> {
        let header = mem.header();
        if !header.encoder.is_recorded() {
            return Err(LearnError::Config("memory does not record encoder dimensions".into()));
        }
        let encoders = Encoders::new(&header.seeds, header.encoder, header.dims.beta)?;
        Self::with_encoders(mem, config, encoders)
    }

    pub fn with_encoders(mem: &AccumMemory, config: LearnConfig, encoders: Encoders) -> Result<Self, LearnError> {
        let dims = mem.dims();
        if config.flush_batch == 0 || config.encode_batch == 0 {
            return Err(LearnError::Config("flush_batch and encode_batch must be at least 1".into()));
        }
        if let Some(t) = config.truncation {
            if t > dims.l_max || t < 2 {
                return Err(LearnError::Config(format!(
                    "truncation {t} must lie in 2..={}",
                    dims.l_max
                )));
            }
        }
        if config.prefix.len() >= dims.l_max {
            return Err(LearnError::Config("prefix leaves no room for targets".into()));
        }
        if let Some(&t) = config.prefix.iter().find(|&&t| t as usize >= dims.vocab_size) {
            return Err(LearnError::Config(format!("prefix token {t} outside vocabulary")));
        }
        if encoders.image.beta() != dims.beta {
            return Err(LearnError::Config("encoder β differs from memory β".into()));
        }
        Ok(Self {
            dims: mem.header().encoder,
            encoders,
            config,
            l_max: dims.l_max,
            vocab_size: dims.vocab_size,
        })
    }

    pub fn encoders(&self) -> &Encoders {
        &self.encoders
    }

    pub fn config(&self) -> &LearnConfig {
        &self.config
    }

    fn prefix_len(&self) -> usize {
        self.config.prefix.len().max(1)
    }

    /// Truncates and validates a record in place.
    pub fn prepare(&self, rec: &mut LearnRecord) -> Result<(), String> {
        rec.truncate(self.config.truncation.unwrap_or(self.l_max));
        let n_c = rec.token_ids.len();
        if rec.hidden.rows() != n_c {
            return Err(format!("{} hidden rows for {n_c} tokens", rec.hidden.rows()));
        }
        if n_c < self.prefix_len() + 1 {
            return Err(format!("caption of {n_c} tokens has no target after the prefix"));
        }
        if n_c > self.l_max {
            return Err(format!("caption of {n_c} tokens exceeds l_max {}", self.l_max));
        }
        if !self.config.prefix.is_empty() && rec.token_ids[..self.config.prefix.len()] != self.config.prefix[..] {
            return Err("caption does not start with the configured prefix".into());
        }
        if let Some(&t) = rec.token_ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(format!("token id {t} outside vocabulary of {}", self.vocab_size));
        }
        if self.dims.is_recorded() {
            if rec.patches.n_p() != self.dims.n_p || rec.patches.d_i() != self.dims.d_i {
                return Err(format!(
                    "patches are {}x{}, memory expects {}x{}",
                    rec.patches.n_p(),
                    rec.patches.d_i(),
                    self.dims.n_p,
                    self.dims.d_i
                ));
            }
            if rec.hidden.cols() != self.dims.d_c {
                return Err(format!("hidden width {} differs from {}", rec.hidden.cols(), self.dims.d_c));
            }
        }
        Ok(())
    }

    /// Absorbs one record; returns the number of accumulate calls.
    pub fn learn_record(&self, mem: &mut AccumMemory, rec: &LearnRecord) -> Result<usize, LearnError> {
        let mut rec = rec.clone();
        self.prepare(&mut rec)
            .map_err(|reason| LearnError::Malformed { index: mem.records_consumed(), reason })?;
        let img = self.encoders.image.encode(&rec.patches)?;
        self.absorb(mem, &img, &rec)
    }

    fn absorb(&self, mem: &mut AccumMemory, img: &crate::hdcore::Hypervector, rec: &LearnRecord) -> Result<usize, LearnError> {
        let p = self.prefix_len();
        let n_c = rec.token_ids.len();
        let context = rec.hidden.truncated(n_c - 1);
        let context = Matrix::new(n_c - p, context.cols(), context.as_slice()[(p - 1) * context.cols()..].to_vec())
            .expect("context rows");
        let caps = self.encoders.caption.encode_positions(&context)?;
        for (k, cap) in caps.iter().enumerate() {
            // Context is the hidden state of token index p-1+k (0-based); the
            // target is the next token, at 1-based position p+1+k.
            let target = p + k;
            let v = combine(img, cap).map_err(EncodeError::from)?;
            mem.accumulate(target + 1, rec.token_ids[target] as usize, &v)?;
        }
        Ok(caps.len())
    }

    /// Absorbs records `[records_consumed, end)` from `source`.
    pub fn learn_stream(
        &self,
        mem: &mut AccumMemory,
        source: &mut dyn RecordSource,
        options: LearnOptions,
    ) -> Result<LearnSummary, LearnError> {
        let start = Instant::now();
        let mut consumed = mem.records_consumed();
        let first = consumed;
        source.seek(consumed).map_err(|e| LearnError::Source(e.to_string()))?;
        let mut summary = LearnSummary::default();
        let flush_batch = self.config.flush_batch as u64;
        let total = source.len();
        'outer: loop {
            // Never straddle a checkpoint, so flush points are independent of
            // the encode batch size.
            let until_flush = flush_batch - consumed % flush_batch;
            let mut want = (self.config.encode_batch as u64).min(until_flush);
            if let Some(h) = options.halt_after {
                if consumed >= h {
                    break;
                }
                want = want.min(h - consumed);
            }
            let mut batch = Vec::with_capacity(want as usize);
            let mut exhausted = false;
            for _ in 0..want {
                let index = consumed + batch.len() as u64;
                match source.next_record() {
                    None => {
                        exhausted = true;
                        break;
                    }
                    Some(Ok(mut rec)) => match self.prepare(&mut rec) {
                        Ok(()) => batch.push(Some(rec)),
                        Err(reason) => {
                            self.on_malformed(index, reason)?;
                            batch.push(None);
                        }
                    },
                    Some(Err(SourceError::Malformed { index, reason })) => {
                        self.on_malformed(index, reason)?;
                        batch.push(None);
                    }
                    Some(Err(SourceError::Io(e))) => return Err(LearnError::Source(e)),
                }
            }
            let images: Vec<PatchFeatures> = batch.iter().flatten().map(|r| r.patches.clone()).collect();
            let mut hvs = self.encoders.image.encode_many(&images)?.into_iter();
            for rec in &batch {
                match rec {
                    Some(rec) => {
                        let img = hvs.next().expect("one code per image");
                        summary.tokens += self.absorb(mem, &img, rec)? as u64;
                    }
                    None => summary.skipped += 1,
                }
                consumed += 1;
                summary.records += 1;
                if consumed % flush_batch == 0 {
                    mem.flush(consumed)?;
                    match total {
                        Some(t) => log::info!("checkpoint {consumed}/{t} records"),
                        None => log::info!("checkpoint {consumed} records"),
                    }
                }
            }
            if exhausted {
                break 'outer;
            }
        }
        let halted = options.halt_after.is_some_and(|h| consumed >= h && Some(consumed) != total);
        if !halted {
            mem.flush(consumed)?;
        }
        summary.records_consumed = if halted { mem.records_consumed() } else { consumed };
        summary.duration = start.elapsed();
        debug_assert!(summary.records_consumed >= first);
        Ok(summary)
    }

    fn on_malformed(&self, index: u64, reason: String) -> Result<(), LearnError> {
        match self.config.malformed {
            MalformedPolicy::Skip => {
                log::warn!("skipping record {index}: {reason}");
                Ok(())
            }
            MalformedPolicy::Abort => Err(LearnError::Malformed { index, reason }),
        }
    }
}
