//! HDSH shard files: pre-extracted learning records.
//!
//! ```text
//! header   "HDSH" | version u32 | n_p u64 | d_I u64 | d_C u64 | record_count u64
//! record*  payload_len u64 | n_c u32 | ids u32[n_c] | patches f32[n_p·d_I] | hidden f32[n_c·d_C]
//! index    offset u64[record_count] | index_start u64 | "HDSI"
//! ```
//!
//! Everything is little-endian. Record offsets point at `payload_len`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::encoders::PatchFeatures;
use crate::learner::{LearnRecord, RecordSource, SourceError};
use crate::matrix::Matrix;
use crate::protomem::EncoderDims;

pub const SHARD_MAGIC: &[u8; 4] = b"HDSH";
pub const INDEX_MAGIC: &[u8; 4] = b"HDSI";
pub const SHARD_VERSION: u32 = 1;
pub const SHARD_HEADER_LEN: u64 = 40;

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a shard file (bad magic)")]
    BadMagic,
    #[error("unsupported shard version {0}")]
    UnsupportedVersion(u32),
    #[error("shard dims {found:?} do not match configuration {expected:?}")]
    DimMismatch { expected: EncoderDims, found: EncoderDims },
    #[error("truncated record at offset {offset}")]
    Truncated { offset: u64 },
    #[error("corrupt record at offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("record {index} out of range ({count} records)")]
    OutOfRange { index: u64, count: u64 },
    #[error("record does not fit shard dims: {0}")]
    RecordShape(String),
}

fn write_header(w: &mut impl Write, dims: EncoderDims, count: u64) -> io::Result<()> {
    w.write_all(SHARD_MAGIC)?;
    w.write_all(&SHARD_VERSION.to_le_bytes())?;
    for v in [dims.n_p as u64, dims.d_i as u64, dims.d_c as u64, count] {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub struct ShardWriter {
    path: PathBuf,
    out: BufWriter<File>,
    dims: EncoderDims,
    offsets: Vec<u64>,
    position: u64,
}

impl ShardWriter {
    pub fn create(path: &Path, dims: EncoderDims) -> Result<Self, ShardError> {
        let mut out = BufWriter::new(File::create(path)?);
        write_header(&mut out, dims, 0)?;
        Ok(Self {
            path: path.to_path_buf(),
            out,
            dims,
            offsets: Vec::new(),
            position: SHARD_HEADER_LEN,
        })
    }

    pub fn write_record(&mut self, rec: &LearnRecord) -> Result<(), ShardError> {
        let n_c = rec.token_ids.len();
        if rec.patches.n_p() != self.dims.n_p || rec.patches.d_i() != self.dims.d_i {
            return Err(ShardError::RecordShape(format!(
                "patches {}x{}",
                rec.patches.n_p(),
                rec.patches.d_i()
            )));
        }
        if rec.hidden.rows() != n_c || rec.hidden.cols() != self.dims.d_c {
            return Err(ShardError::RecordShape(format!(
                "hidden {}x{} for {n_c} tokens",
                rec.hidden.rows(),
                rec.hidden.cols()
            )));
        }
        let payload = 4 + 4 * n_c + 4 * rec.patches.matrix().as_slice().len() + 4 * rec.hidden.as_slice().len();
        self.offsets.push(self.position);
        let w = &mut self.out;
        w.write_all(&(payload as u64).to_le_bytes())?;
        w.write_all(&(n_c as u32).to_le_bytes())?;
        for id in &rec.token_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        for x in rec.patches.matrix().as_slice().iter().chain(rec.hidden.as_slice()) {
            w.write_all(&x.to_le_bytes())?;
        }
        self.position += 8 + payload as u64;
        Ok(())
    }

    /// Writes the index and the final record count.
    pub fn finish(mut self) -> Result<PathBuf, ShardError> {
        for off in &self.offsets {
            self.out.write_all(&off.to_le_bytes())?;
        }
        self.out.write_all(&self.position.to_le_bytes())?;
        self.out.write_all(INDEX_MAGIC)?;
        let mut file = self.out.into_inner().map_err(|e| e.into_error())?;
        file.seek(SeekFrom::Start(0))?;
        write_header(&mut file, self.dims, self.offsets.len() as u64)?;
        file.sync_all()?;
        Ok(self.path)
    }
}

pub struct ShardReader {
    path: PathBuf,
    file: BufReader<File>,
    dims: EncoderDims,
    offsets: Vec<u64>,
    data_end: u64,
    cursor: u64,
}

impl std::fmt::Debug for ShardReader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShardReader")
            .field("path", &self.path)
            .field("dims", &self.dims)
            .field("records", &self.offsets.len())
            .finish()
    }
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads exactly `buf.len()` bytes or reports a truncated record.
fn read_record_bytes(r: &mut impl Read, buf: &mut [u8], offset: u64) -> Result<(), ShardError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ShardError::Truncated { offset },
        _ => ShardError::Io(e),
    })
}

impl ShardReader {
    /// Opens a shard; when `expected` is given, its dims must match before
    /// any record is read.
    pub fn open(path: &Path, expected: Option<EncoderDims>) -> Result<Self, ShardError> {
        let mut file = BufReader::new(File::open(path)?);
        let len = file.get_ref().metadata()?.len();
        let mut head = [0u8; SHARD_HEADER_LEN as usize];
        file.read_exact(&mut head).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => ShardError::BadMagic,
            _ => ShardError::Io(e),
        })?;
        if &head[0..4] != SHARD_MAGIC {
            return Err(ShardError::BadMagic);
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != SHARD_VERSION {
            return Err(ShardError::UnsupportedVersion(version));
        }
        let word = |i: usize| u64::from_le_bytes(head[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let dims = EncoderDims {
            n_p: word(0) as usize,
            d_i: word(1) as usize,
            d_c: word(2) as usize,
        };
        let count = word(3);
        if let Some(expected) = expected {
            if expected != dims {
                return Err(ShardError::DimMismatch { expected, found: dims });
            }
        }
        let (offsets, data_end) = match Self::read_index(&mut file, len, count)? {
            Some(found) => found,
            None => Self::scan(&mut file, len, count)?,
        };
        let mut reader = Self {
            path: path.to_path_buf(),
            file,
            dims,
            offsets,
            data_end,
            cursor: 0,
        };
        reader.seek_index(0)?;
        Ok(reader)
    }

    fn read_index(file: &mut BufReader<File>, len: u64, count: u64) -> Result<Option<(Vec<u64>, u64)>, ShardError> {
        if len < SHARD_HEADER_LEN + 12 {
            return Ok(None);
        }
        file.seek(SeekFrom::Start(len - 12))?;
        let index_start = read_u64(file)?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        let index_len = count.checked_mul(8).and_then(|n| n.checked_add(12));
        if &magic != INDEX_MAGIC || index_len.and_then(|n| index_start.checked_add(n)) != Some(len) {
            return Ok(None);
        }
        file.seek(SeekFrom::Start(index_start))?;
        let mut offsets = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let off = read_u64(file)?;
            if off < SHARD_HEADER_LEN || off >= index_start {
                return Err(ShardError::Corrupt {
                    offset: index_start,
                    reason: format!("index entry {off} outside the record region"),
                });
            }
            offsets.push(off);
        }
        Ok(Some((offsets, index_start)))
    }

    /// Rebuilds offsets by walking records when the tail index is missing.
    fn scan(file: &mut BufReader<File>, len: u64, count: u64) -> Result<(Vec<u64>, u64), ShardError> {
        let mut offsets = Vec::new();
        let mut pos = SHARD_HEADER_LEN;
        for _ in 0..count {
            if pos + 8 > len {
                return Err(ShardError::Truncated { offset: pos });
            }
            file.seek(SeekFrom::Start(pos))?;
            let payload = read_u64(file)?;
            let end = pos.checked_add(8 + payload).ok_or(ShardError::Truncated { offset: pos })?;
            if end > len {
                return Err(ShardError::Truncated { offset: pos });
            }
            offsets.push(pos);
            pos = end;
        }
        Ok((offsets, pos))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn record_count(&self) -> u64 {
        self.offsets.len() as u64
    }

    fn seek_index(&mut self, index: u64) -> Result<(), ShardError> {
        self.cursor = index.min(self.record_count());
        if let Some(&off) = self.offsets.get(self.cursor as usize) {
            self.file.seek(SeekFrom::Start(off))?;
        }
        Ok(())
    }

    /// Random access to record `index`.
    pub fn read(&mut self, index: u64) -> Result<LearnRecord, ShardError> {
        if index >= self.record_count() {
            return Err(ShardError::OutOfRange {
                index,
                count: self.record_count(),
            });
        }
        self.seek_index(index)?;
        self.read_next().expect("index in range")
    }

    fn read_next(&mut self) -> Option<Result<LearnRecord, ShardError>> {
        let offset = *self.offsets.get(self.cursor as usize)?;
        let end = self
            .offsets
            .get(self.cursor as usize + 1)
            .copied()
            .unwrap_or(self.data_end);
        self.cursor += 1;
        Some(self.decode_at(offset, end))
    }

    fn decode_at(&mut self, offset: u64, end: u64) -> Result<LearnRecord, ShardError> {
        let EncoderDims { n_p, d_i, d_c } = self.dims;
        let mut len = [0u8; 8];
        read_record_bytes(&mut self.file, &mut len, offset)?;
        let payload = u64::from_le_bytes(len);
        if offset + 8 + payload > end {
            return Err(ShardError::Truncated { offset });
        }
        if payload < 4 {
            return Err(ShardError::Corrupt {
                offset,
                reason: "payload shorter than its caption length".into(),
            });
        }
        let mut buf = vec![0u8; payload as usize];
        read_record_bytes(&mut self.file, &mut buf, offset)?;
        let n_c = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
        let expected = 4 + 4 * n_c + 4 * n_p * d_i + 4 * n_c * d_c;
        if expected != buf.len() {
            return Err(ShardError::Corrupt {
                offset,
                reason: format!("payload of {} bytes, {n_c} tokens imply {expected}", buf.len()),
            });
        }
        let mut words = buf[4..].chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
        let token_ids: Vec<u32> = words.by_ref().take(n_c).map(u32::from_le_bytes).collect();
        let patches: Vec<f32> = words.by_ref().take(n_p * d_i).map(f32::from_le_bytes).collect();
        let hidden: Vec<f32> = words.map(f32::from_le_bytes).collect();
        Ok(LearnRecord {
            patches: PatchFeatures(Matrix::new(n_p, d_i, patches).expect("checked size")),
            token_ids,
            hidden: Matrix::new(n_c, d_c, hidden).expect("checked size"),
        })
    }
}

impl Iterator for ShardReader {
    type Item = Result<LearnRecord, ShardError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.read_next()
    }
}

impl RecordSource for ShardReader {
    fn len(&self) -> Option<u64> {
        Some(self.record_count())
    }

    fn seek(&mut self, index: u64) -> Result<(), SourceError> {
        self.seek_index(index).map_err(|e| SourceError::Io(e.to_string()))
    }

    fn next_record(&mut self) -> Option<Result<LearnRecord, SourceError>> {
        let index = self.cursor;
        self.read_next().map(|r| {
            r.map_err(|e| match e {
                ShardError::Io(e) => SourceError::Io(e.to_string()),
                other => SourceError::Malformed {
                    index,
                    reason: other.to_string(),
                },
            })
        })
    }
}
