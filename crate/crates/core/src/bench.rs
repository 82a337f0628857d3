//! Retrieval timing over a packed memory, with an unpacked reference path
//! for comparison.
//!
//! Each simulated decode step scores every prototype of `W` position
//! slices against a random query, then takes the argmax. Queries are random
//! because retrieval cost does not depend on their content.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoder::{hd_logits, DecodeError};
use crate::hdcore::{Hypervector, PackedHypervector};
use crate::protomem::{EncoderDims, MemoryDims, MemoryError, PackedMemory, Seeds};

/// One position slice expanded to one `i8` per component.
#[derive(Debug, Clone)]
pub struct UnpackedSlice {
    beta: usize,
    data: Vec<i8>,
}

impl UnpackedSlice {
    pub fn from_memory(mem: &PackedMemory, position: usize) -> Result<Self, MemoryError> {
        let rows = mem.slice(position)?;
        let beta = rows.dims();
        let mut data = Vec::with_capacity(rows.len() * beta);
        for t in 0..rows.len() {
            data.extend_from_slice(rows.row_vector(t).unpack().as_slice());
        }
        Ok(Self { beta, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.beta
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.data.len()
    }

    /// Component-by-component Hamming distance to every row.
    pub fn hamming(&self, query: &Hypervector) -> Vec<u32> {
        let q = query.as_slice();
        assert_eq!(q.len(), self.beta, "query dims");
        self.data
            .chunks_exact(self.beta)
            .map(|row| row.iter().zip(q).map(|(a, b)| (a != b) as u32).sum())
            .collect()
    }
}

/// Fills a packed memory with uniform random prototypes.
pub fn build_random_memory(path: &Path, dims: MemoryDims, seed: u64, overwrite: bool) -> Result<PackedMemory, MemoryError> {
    PackedMemory::build(
        path,
        dims,
        Seeds::from_master(seed),
        EncoderDims::default(),
        overwrite,
        |position, slice| ChaCha8Rng::seed_from_u64(seed ^ position as u64).fill_bytes(slice),
    )
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn random_queries(beta: usize, n: usize, seed: u64) -> Vec<Hypervector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Hypervector::random(beta, &mut rng)).collect()
}

/// Positions visited by a caption of `length` tokens after a one-token
/// prefix.
fn positions(length: usize) -> impl Iterator<Item = usize> {
    2..length + 2
}

/// Bytes read by one decode of `length` tokens with window `window`.
pub fn bytes_scanned(dims: MemoryDims, length: usize, window: usize) -> u64 {
    let slice = (dims.vocab_size * dims.packed_row_bytes()) as u64;
    positions(length)
        .map(|p| ((p + window - 1).min(dims.l_max) + 1 - p) as u64 * slice)
        .sum()
}

/// Time to run the retrieval of one caption over the packed memory.
pub fn time_packed(mem: &PackedMemory, queries: &[PackedHypervector], window: usize) -> Result<Duration, DecodeError> {
    let start = Instant::now();
    let mut sink = 0usize;
    for (p, q) in positions(queries.len()).zip(queries) {
        sink ^= argmax(&hd_logits(mem, q, p, window)?.values);
    }
    std::hint::black_box(sink);
    Ok(start.elapsed())
}

/// The same retrieval over unpacked slices. Position `p` maps to
/// `slices[(p + w) % slices.len()]`, which keeps memory bounded while
/// every scored slice costs the same as a real one.
pub fn time_unpacked(slices: &[UnpackedSlice], beta: usize, l_max: usize, queries: &[Hypervector], window: usize) -> Duration {
    let start = Instant::now();
    let mut sink = 0usize;
    for (p, q) in positions(queries.len()).zip(queries) {
        let mut best = vec![f64::NEG_INFINITY; slices[0].len()];
        for w in 0..window {
            if p + w > l_max {
                break;
            }
            let d = slices[(p + w) % slices.len()].hamming(q);
            for (b, d) in best.iter_mut().zip(d) {
                *b = b.max((beta - d as usize) as f64);
            }
        }
        sink ^= argmax(&best);
    }
    std::hint::black_box(sink);
    start.elapsed()
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub caption_length: usize,
    pub window: usize,
    pub tokens_per_sec: f64,
    pub bytes_scanned: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unpacked_tokens_per_sec: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub windows: Vec<usize>,
    /// Timed runs per row; the median is reported.
    pub repeats: usize,
    pub compare_unpacked: bool,
    /// Unpacked slices held in memory for the comparison.
    pub unpacked_slices: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![5, 10, 15],
            windows: vec![1, 3],
            repeats: 3,
            compare_unpacked: false,
            unpacked_slices: 2,
            seed: 0,
        }
    }
}

fn median(mut ds: Vec<Duration>) -> Duration {
    ds.sort();
    ds[ds.len() / 2]
}

/// One row per `(length, window)` pair, lengths outermost.
pub fn run(mem: &PackedMemory, cfg: &BenchConfig) -> Result<Vec<BenchRow>, DecodeError> {
    let dims = mem.dims();
    if cfg.repeats == 0 {
        return Err(DecodeError::Config("repeats must be at least 1".into()));
    }
    if let Some(&l) = cfg.lengths.iter().find(|&&l| l == 0 || l + 1 > dims.l_max) {
        return Err(DecodeError::Config(format!(
            "caption length {l} needs positions 2..={} but l_max is {}",
            l + 1,
            dims.l_max
        )));
    }
    if cfg.windows.contains(&0) {
        return Err(DecodeError::Config("window must be at least 1".into()));
    }
    let unpacked = if cfg.compare_unpacked {
        let n = cfg.unpacked_slices.clamp(1, dims.l_max);
        (2..2 + n)
            .map(|p| UnpackedSlice::from_memory(mem, p.min(dims.l_max)))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    let mut rows = Vec::new();
    for &length in &cfg.lengths {
        let queries = random_queries(dims.beta, length, cfg.seed ^ length as u64);
        let packed: Vec<PackedHypervector> = queries.iter().map(Hypervector::pack).collect();
        for &window in &cfg.windows {
            let t = median(
                (0..cfg.repeats)
                    .map(|_| time_packed(mem, &packed, window))
                    .collect::<Result<_, _>>()?,
            );
            let unpacked_tps = (!unpacked.is_empty()).then(|| {
                let t = median(
                    (0..cfg.repeats)
                        .map(|_| time_unpacked(&unpacked, dims.beta, dims.l_max, &queries, window))
                        .collect(),
                );
                length as f64 / t.as_secs_f64()
            });
            rows.push(BenchRow {
                caption_length: length,
                window,
                tokens_per_sec: length as f64 / t.as_secs_f64(),
                bytes_scanned: bytes_scanned(dims, length, window),
                unpacked_tokens_per_sec: unpacked_tps,
            });
        }
    }
    Ok(rows)
}
