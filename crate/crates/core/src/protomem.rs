//! Disk-resident prototype memory.
//!
//! A memory file is a 256-byte header followed by a row-major
//! `(position, token, component)` data region. While learning, each
//! component is a little-endian `i32` running sum (`AccumI32`). After
//! binarization, each row is a packed bit vector (`PackedBits`).
//!
//! Header layout (all little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `HDFP`                            |
//! | 4      | 4    | format version (`u32`, currently 1)     |
//! | 8      | 1    | state: 0 = AccumI32, 1 = PackedBits     |
//! | 16     | 8    | `l_max`                                 |
//! | 24     | 8    | vocabulary size                         |
//! | 32     | 8    | β                                       |
//! | 40     | 8    | image LSH seed                          |
//! | 48     | 8    | caption LSH seed                        |
//! | 56     | 8    | positional-code seed                    |
//! | 64     | 8    | sampler seed                            |
//! | 72     | 8    | records consumed                        |
//! | 80     | 1    | validity flag (1 = complete)            |
//! | 88     | 8    | patch count `n_p` (0 = unrecorded)      |
//! | 96     | 8    | image feature width `d_I` (0 = unrecorded) |
//! | 104    | 8    | caption hidden width `d_C` (0 = unrecorded) |
//!
//! All other header bytes are zero. Position 1 holds the prefix and is
//! never written; prediction targets start at position 2.
//!
//! Updates to an `AccumI32` memory are staged in RAM and committed by
//! [`AccumMemory::flush`] through a redo journal holding the new value of
//! every touched row. The journal is made durable before the data region is
//! touched, and replaying it is idempotent, so a process killed at any
//! point reopens either at the previous checkpoint or at the new one.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use memmap2::{Mmap, MmapMut, MmapOptions};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hdcore::{clear_padding, packed_len, AccumVector, HdError, Hypervector, PackedHypervector, PackedRows, TieRule};
use crate::rng::derive_seed;

pub const HEADER_LEN: usize = 256;
pub const MAGIC: &[u8; 4] = b"HDFP";
pub const FORMAT_VERSION: u32 = 1;

const JOURNAL_MAGIC: &[u8; 4] = b"HDFJ";
const JOURNAL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0} already exists; pass overwrite to replace it")]
    Exists(PathBuf),
    #[error("{0} is locked by another writer")]
    Locked(PathBuf),
    #[error("not a prototype memory file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown state byte {0}")]
    UnknownState(u8),
    #[error("memory is in state {found:?}, operation needs {expected:?}")]
    WrongState {
        expected: MemoryState,
        found: MemoryState,
    },
    #[error("memory file is incomplete (validity flag unset)")]
    Incomplete,
    #[error("file is {found} bytes, header implies {expected}")]
    Length { expected: u64, found: u64 },
    #[error("dimensions must be positive")]
    EmptyDims,
    #[error("memory of these dimensions exceeds the addressable size")]
    TooLarge,
    #[error("insufficient disk space: need {needed} bytes, {available} available")]
    InsufficientSpace { needed: u64, available: u64 },
    #[error("position {position} outside 1..={l_max}")]
    PositionOutOfRange { position: usize, l_max: usize },
    #[error("position 1 holds the prefix and is never written")]
    ReservedPosition,
    #[error("token {token} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("records consumed cannot move backwards ({current} -> {requested})")]
    CountRegression { current: u64, requested: u64 },
    #[error("memory has staged writes; flush first")]
    PendingWrites,
    #[error("corrupt journal: {0}")]
    Journal(String),
    #[error("memories are incompatible: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Hd(#[from] HdError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> MemoryError + '_ {
    move |source| MemoryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemoryState {
    AccumI32,
    PackedBits,
}

impl MemoryState {
    fn to_byte(self) -> u8 {
        match self {
            MemoryState::AccumI32 => 0,
            MemoryState::PackedBits => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self, MemoryError> {
        match b {
            0 => Ok(MemoryState::AccumI32),
            1 => Ok(MemoryState::PackedBits),
            other => Err(MemoryError::UnknownState(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryDims {
    pub l_max: usize,
    pub vocab_size: usize,
    pub beta: usize,
}

impl MemoryDims {
    pub fn new(l_max: usize, vocab_size: usize, beta: usize) -> Result<Self, MemoryError> {
        if l_max == 0 || vocab_size == 0 || beta == 0 {
            return Err(MemoryError::EmptyDims);
        }
        let dims = Self {
            l_max,
            vocab_size,
            beta,
        };
        dims.accum_data_len().ok_or(MemoryError::TooLarge)?;
        Ok(dims)
    }

    pub fn cells(&self) -> Option<u64> {
        (self.l_max as u64).checked_mul(self.vocab_size as u64)
    }

    /// Bytes in the `AccumI32` data region.
    pub fn accum_data_len(&self) -> Option<u64> {
        self.cells()?.checked_mul(self.beta as u64)?.checked_mul(4)
    }

    /// Bytes in the `PackedBits` data region.
    pub fn packed_data_len(&self) -> Option<u64> {
        self.cells()?.checked_mul(packed_len(self.beta) as u64)
    }

    pub fn packed_row_bytes(&self) -> usize {
        packed_len(self.beta)
    }

    fn check_cell(&self, position: usize, token: usize) -> Result<(), MemoryError> {
        if position == 0 || position > self.l_max {
            return Err(MemoryError::PositionOutOfRange {
                position,
                l_max: self.l_max,
            });
        }
        if token >= self.vocab_size {
            return Err(MemoryError::TokenOutOfRange {
                token,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    fn cell_index(&self, position: usize, token: usize) -> usize {
        (position - 1) * self.vocab_size + token
    }
}

/// Widths of the encoder inputs the memory was learned with. Zero means
/// "not recorded".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub n_p: usize,
    pub d_i: usize,
    pub d_c: usize,
}

impl EncoderDims {
    pub fn is_recorded(&self) -> bool {
        self.n_p != 0 && self.d_i != 0 && self.d_c != 0
    }
}

/// Every seed needed to regenerate the projections and positional codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub lsh_image: u64,
    pub lsh_caption: u64,
    pub positional: u64,
    pub sampler: u64,
}

impl Seeds {
    pub fn from_master(seed: u64) -> Self {
        Self {
            lsh_image: derive_seed(seed, 1),
            lsh_caption: derive_seed(seed, 2),
            positional: derive_seed(seed, 3),
            sampler: derive_seed(seed, 4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub state: MemoryState,
    pub dims: MemoryDims,
    pub seeds: Seeds,
    pub records_consumed: u64,
    pub valid: bool,
    pub encoder: EncoderDims,
}

impl Header {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(MAGIC);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8] = self.state.to_byte();
        let words = [
            (16, self.dims.l_max as u64),
            (24, self.dims.vocab_size as u64),
            (32, self.dims.beta as u64),
            (40, self.seeds.lsh_image),
            (48, self.seeds.lsh_caption),
            (56, self.seeds.positional),
            (64, self.seeds.sampler),
            (72, self.records_consumed),
            (88, self.encoder.n_p as u64),
            (96, self.encoder.d_i as u64),
            (104, self.encoder.d_c as u64),
        ];
        for (off, v) in words {
            b[off..off + 8].copy_from_slice(&v.to_le_bytes());
        }
        b[80] = self.valid as u8;
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, MemoryError> {
        if b.len() < HEADER_LEN {
            return Err(MemoryError::Length {
                expected: HEADER_LEN as u64,
                found: b.len() as u64,
            });
        }
        if &b[0..4] != MAGIC {
            return Err(MemoryError::BadMagic);
        }
        let version = u32::from_le_bytes(b[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(MemoryError::UnsupportedVersion(version));
        }
        let word = |off: usize| u64::from_le_bytes(b[off..off + 8].try_into().unwrap());
        let dims = MemoryDims::new(word(16) as usize, word(24) as usize, word(32) as usize)?;
        Ok(Self {
            version,
            state: MemoryState::from_byte(b[8])?,
            dims,
            seeds: Seeds {
                lsh_image: word(40),
                lsh_caption: word(48),
                positional: word(56),
                sampler: word(64),
            },
            records_consumed: word(72),
            valid: b[80] == 1,
            encoder: EncoderDims {
                n_p: word(88) as usize,
                d_i: word(96) as usize,
                d_c: word(104) as usize,
            },
        })
    }

    fn data_len(&self) -> u64 {
        match self.state {
            MemoryState::AccumI32 => self.dims.accum_data_len(),
            MemoryState::PackedBits => self.dims.packed_data_len(),
        }
        .expect("checked at construction")
    }
}

/// Reads just the header of a memory file.
pub fn read_header(path: &Path) -> Result<Header, MemoryError> {
    let mut f = File::open(path).map_err(io_err(path))?;
    let mut b = [0u8; HEADER_LEN];
    f.read_exact(&mut b).map_err(io_err(path))?;
    Header::from_bytes(&b)
}

pub fn journal_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".journal");
    PathBuf::from(s)
}

fn journal_tmp_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".journal.tmp");
    PathBuf::from(s)
}

fn sync_parent(path: &Path) -> Result<(), MemoryError> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    File::open(parent)
        .and_then(|d| d.sync_all())
        .map_err(io_err(parent))
}

#[cfg(unix)]
fn available_space(path: &Path) -> Option<u64> {
    use std::ffi::CString;
    use std::os::unix::ffi::OsStrExt;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let c = CString::new(dir.as_os_str().as_bytes()).ok()?;
    // SAFETY: statvfs only writes into the struct we pass.
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    if unsafe { libc::statvfs(c.as_ptr(), &mut st) } != 0 {
        return None;
    }
    Some(st.f_bavail as u64 * st.f_frsize as u64)
}

#[cfg(not(unix))]
fn available_space(_path: &Path) -> Option<u64> {
    None
}

#[cfg(unix)]
fn lock_exclusive(file: &File, path: &Path) -> Result<(), MemoryError> {
    use std::os::unix::io::AsRawFd;
    // SAFETY: plain flock on a descriptor we own.
    let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
    if rc != 0 {
        return Err(MemoryError::Locked(path.to_path_buf()));
    }
    Ok(())
}

#[cfg(not(unix))]
fn lock_exclusive(_file: &File, _path: &Path) -> Result<(), MemoryError> {
    Ok(())
}

/// Creates (or replaces) a file of `HEADER_LEN + data_len` zero bytes with
/// `header` written, and maps it writable.
fn create_file(
    path: &Path,
    header: &Header,
    overwrite: bool,
) -> Result<(File, MmapMut), MemoryError> {
    if path.exists() && !overwrite {
        return Err(MemoryError::Exists(path.to_path_buf()));
    }
    let total = (HEADER_LEN as u64)
        .checked_add(header.data_len())
        .ok_or(MemoryError::TooLarge)?;
    usize::try_from(total).map_err(|_| MemoryError::TooLarge)?;
    if let Some(available) = available_space(path) {
        let existing = fs::metadata(path).map(|m| m.len()).unwrap_or(0);
        if total > available + existing {
            return Err(MemoryError::InsufficientSpace {
                needed: total,
                available,
            });
        }
    }
    let _ = fs::remove_file(journal_path(path));
    let _ = fs::remove_file(journal_tmp_path(path));
    let file = OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(true)
        .open(path)
        .map_err(io_err(path))?;
    lock_exclusive(&file, path)?;
    file.set_len(total).map_err(io_err(path))?;
    // SAFETY: the file is exclusively locked by this process for the
    // lifetime of the mapping.
    let mut map = unsafe { MmapOptions::new().map_mut(&file) }.map_err(io_err(path))?;
    map[..HEADER_LEN].copy_from_slice(&header.to_bytes());
    map.flush_range(0, HEADER_LEN).map_err(io_err(path))?;
    Ok((file, map))
}

fn check_length(path: &Path, header: &Header, found: u64) -> Result<(), MemoryError> {
    let expected = HEADER_LEN as u64 + header.data_len();
    if found != expected {
        return Err(MemoryError::Length {
            expected,
            found,
        });
    }
    let _ = path;
    Ok(())
}

#[inline]
fn pack_sums(sums: &[u8], beta: usize, tie: TieRule, out: &mut [u8]) {
    out.fill(0);
    for (k, raw) in sums.chunks_exact(4).take(beta).enumerate() {
        let s = i32::from_le_bytes(raw.try_into().unwrap());
        if tie.sign_i64(s as i64) > 0 {
            out[k / 8] |= 1 << (k % 8);
        }
    }
}

/// A memory in either state, as found on disk.
#[derive(Debug)]
pub enum PrototypeMemory {
    Accum(AccumMemory),
    Packed(PackedMemory),
}

impl PrototypeMemory {
    pub fn open(path: &Path) -> Result<Self, MemoryError> {
        match read_header(path)?.state {
            MemoryState::AccumI32 => AccumMemory::open(path).map(PrototypeMemory::Accum),
            MemoryState::PackedBits => PackedMemory::open(path).map(PrototypeMemory::Packed),
        }
    }

    pub fn header(&self) -> &Header {
        match self {
            PrototypeMemory::Accum(m) => m.header(),
            PrototypeMemory::Packed(m) => m.header(),
        }
    }

    pub fn into_accum(self) -> Result<AccumMemory, MemoryError> {
        match self {
            PrototypeMemory::Accum(m) => Ok(m),
            PrototypeMemory::Packed(_) => Err(MemoryError::WrongState {
                expected: MemoryState::AccumI32,
                found: MemoryState::PackedBits,
            }),
        }
    }

    pub fn into_packed(self) -> Result<PackedMemory, MemoryError> {
        match self {
            PrototypeMemory::Packed(m) => Ok(m),
            PrototypeMemory::Accum(_) => Err(MemoryError::WrongState {
                expected: MemoryState::PackedBits,
                found: MemoryState::AccumI32,
            }),
        }
    }
}

/// An `AccumI32` memory open for learning. Single writer: the file is
/// exclusively locked while this value lives.
pub struct AccumMemory {
    path: PathBuf,
    _file: File,
    map: MmapMut,
    header: Header,
    pending: BTreeMap<(u32, u32), Vec<PackedHypervector>>,
}

impl std::fmt::Debug for AccumMemory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AccumMemory")
            .field("path", &self.path)
            .field("header", &self.header)
            .field("pending_cells", &self.pending.len())
            .finish()
    }
}

impl AccumMemory {
    pub fn create(
        path: &Path,
        dims: MemoryDims,
        seeds: Seeds,
        encoder: EncoderDims,
        overwrite: bool,
    ) -> Result<Self, MemoryError> {
        let header = Header {
            version: FORMAT_VERSION,
            state: MemoryState::AccumI32,
            dims,
            seeds,
            records_consumed: 0,
            valid: true,
            encoder,
        };
        let (file, map) = create_file(path, &header, overwrite)?;
        Ok(Self {
            path: path.to_path_buf(),
            _file: file,
            map,
            header,
            pending: BTreeMap::new(),
        })
    }

    /// Opens an existing memory, replaying a leftover commit journal first.
    pub fn open(path: &Path) -> Result<Self, MemoryError> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        lock_exclusive(&file, path)?;
        let mut raw = [0u8; HEADER_LEN];
        (&file).read_exact(&mut raw).map_err(io_err(path))?;
        let header = Header::from_bytes(&raw)?;
        if header.state != MemoryState::AccumI32 {
            return Err(MemoryError::WrongState {
                expected: MemoryState::AccumI32,
                found: header.state,
            });
        }
        if !header.valid {
            return Err(MemoryError::Incomplete);
        }
        let len = file.metadata().map_err(io_err(path))?.len();
        check_length(path, &header, len)?;
        // SAFETY: exclusively locked, see `create_file`.
        let map = unsafe { MmapOptions::new().map_mut(&file) }.map_err(io_err(path))?;
        let mut mem = Self {
            path: path.to_path_buf(),
            _file: file,
            map,
            header,
            pending: BTreeMap::new(),
        };
        let _ = fs::remove_file(journal_tmp_path(path));
        let journal = journal_path(path);
        if journal.exists() {
            log::warn!("replaying commit journal {}", journal.display());
            mem.finish_commit(&journal)?;
        }
        Ok(mem)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn dims(&self) -> MemoryDims {
        self.header.dims
    }

    pub fn seeds(&self) -> Seeds {
        self.header.seeds
    }

    pub fn records_consumed(&self) -> u64 {
        self.header.records_consumed
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    /// Staged contributions not yet committed.
    pub fn pending_contributions(&self) -> usize {
        self.pending.values().map(Vec::len).sum()
    }

    fn row_offset(&self, position: usize, token: usize) -> usize {
        HEADER_LEN + self.header.dims.cell_index(position, token) * self.header.dims.beta * 4
    }

    fn row_bytes(&self, position: usize, token: usize) -> &[u8] {
        let off = self.row_offset(position, token);
        &self.map[off..off + self.header.dims.beta * 4]
    }

    /// The row as of the last durable flush.
    pub fn committed_row(&self, position: usize, token: usize) -> Result<AccumVector, MemoryError> {
        self.header.dims.check_cell(position, token)?;
        Ok(AccumVector::from_sums(
            self.row_bytes(position, token)
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ))
    }

    /// The row including staged contributions.
    pub fn row(&self, position: usize, token: usize) -> Result<AccumVector, MemoryError> {
        let mut acc = self.committed_row(position, token)?;
        if let Some(contribs) = self.pending.get(&(position as u32, token as u32)) {
            for c in contribs {
                acc.accumulate_packed(c)?;
            }
        }
        Ok(acc)
    }

    /// Adds `v` to row `(position, token)`. The update is staged and
    /// becomes durable at the next [`flush`](Self::flush).
    pub fn accumulate(&mut self, position: usize, token: usize, v: &Hypervector) -> Result<(), MemoryError> {
        self.header.dims.check_cell(position, token)?;
        if position == 1 {
            return Err(MemoryError::ReservedPosition);
        }
        if v.dims() != self.header.dims.beta {
            return Err(HdError::DimensionMismatch {
                expected: self.header.dims.beta,
                found: v.dims(),
            }
            .into());
        }
        self.pending
            .entry((position as u32, token as u32))
            .or_default()
            .push(v.pack());
        Ok(())
    }

    /// Drops staged contributions.
    pub fn discard_pending(&mut self) {
        self.pending.clear();
    }

    /// Commits staged contributions and records `records_consumed` in the
    /// header. Data reaches disk before the header does.
    pub fn flush(&mut self, records_consumed: u64) -> Result<(), MemoryError> {
        let current = self.header.records_consumed;
        if records_consumed < current {
            return Err(MemoryError::CountRegression {
                current,
                requested: records_consumed,
            });
        }
        if self.pending.is_empty() && records_consumed == current {
            return Ok(());
        }
        let journal = self.write_journal(records_consumed)?;
        self.finish_commit(&journal)?;
        self.pending.clear();
        Ok(())
    }

    /// Writes the post-commit value of every touched row to a durable
    /// journal. Nothing in the memory file changes.
    fn write_journal(&self, records_consumed: u64) -> Result<PathBuf, MemoryError> {
        let tmp = journal_tmp_path(&self.path);
        let beta = self.header.dims.beta;
        {
            let file = File::create(&tmp).map_err(io_err(&tmp))?;
            let mut w = HashingWriter::new(BufWriter::new(file));
            w.write_all(JOURNAL_MAGIC).map_err(io_err(&tmp))?;
            w.write_all(&JOURNAL_VERSION.to_le_bytes()).map_err(io_err(&tmp))?;
            w.write_all(&records_consumed.to_le_bytes()).map_err(io_err(&tmp))?;
            w.write_all(&(beta as u64).to_le_bytes()).map_err(io_err(&tmp))?;
            w.write_all(&(self.pending.len() as u64).to_le_bytes())
                .map_err(io_err(&tmp))?;
            let mut buf = vec![0u8; beta * 4];
            for (&(pos, tok), contribs) in &self.pending {
                let mut acc = self.committed_row(pos as usize, tok as usize)?;
                for c in contribs {
                    acc.accumulate_packed(c)?;
                }
                for (dst, s) in buf.chunks_exact_mut(4).zip(acc.as_slice()) {
                    dst.copy_from_slice(&s.to_le_bytes());
                }
                w.write_all(&pos.to_le_bytes()).map_err(io_err(&tmp))?;
                w.write_all(&tok.to_le_bytes()).map_err(io_err(&tmp))?;
                w.write_all(&buf).map_err(io_err(&tmp))?;
            }
            let (mut inner, digest) = w.finish();
            inner.write_all(&digest).map_err(io_err(&tmp))?;
            let file = inner.into_inner().map_err(|e| MemoryError::Io {
                path: tmp.clone(),
                source: e.into_error(),
            })?;
            file.sync_all().map_err(io_err(&tmp))?;
        }
        let journal = journal_path(&self.path);
        fs::rename(&tmp, &journal).map_err(io_err(&journal))?;
        sync_parent(&journal)?;
        Ok(journal)
    }

    /// Applies a journal (idempotent), then advances the header and removes
    /// the journal.
    fn finish_commit(&mut self, journal: &Path) -> Result<(), MemoryError> {
        let records = self.apply_journal(journal)?;
        self.map.flush().map_err(io_err(&self.path))?;
        self.header.records_consumed = records;
        self.map[..HEADER_LEN].copy_from_slice(&self.header.to_bytes());
        self.map
            .flush_range(0, HEADER_LEN)
            .map_err(io_err(&self.path))?;
        fs::remove_file(journal).map_err(io_err(journal))?;
        sync_parent(journal)?;
        Ok(())
    }

    fn apply_journal(&mut self, journal: &Path) -> Result<u64, MemoryError> {
        verify_journal(journal)?;
        let file = File::open(journal).map_err(io_err(journal))?;
        let mut r = BufReader::new(file);
        let mut head = [0u8; 32];
        r.read_exact(&mut head).map_err(io_err(journal))?;
        let records = u64::from_le_bytes(head[8..16].try_into().unwrap());
        let beta = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
        let cells = u64::from_le_bytes(head[24..32].try_into().unwrap());
        if beta != self.header.dims.beta {
            return Err(MemoryError::Journal(format!(
                "journal β {beta} does not match memory β {}",
                self.header.dims.beta
            )));
        }
        if records < self.header.records_consumed {
            return Err(MemoryError::Journal(format!(
                "journal checkpoint {records} precedes header checkpoint {}",
                self.header.records_consumed
            )));
        }
        let mut cell = [0u8; 8];
        let mut buf = vec![0u8; beta * 4];
        for _ in 0..cells {
            r.read_exact(&mut cell).map_err(io_err(journal))?;
            r.read_exact(&mut buf).map_err(io_err(journal))?;
            let pos = u32::from_le_bytes(cell[0..4].try_into().unwrap()) as usize;
            let tok = u32::from_le_bytes(cell[4..8].try_into().unwrap()) as usize;
            self.header
                .dims
                .check_cell(pos, tok)
                .map_err(|e| MemoryError::Journal(e.to_string()))?;
            let off = self.row_offset(pos, tok);
            self.map[off..off + buf.len()].copy_from_slice(&buf);
        }
        Ok(records)
    }

    /// Binarizes every row (tie → +1) into a new packed memory at `out`.
    pub fn binarize_pack(&self, out: &Path, overwrite: bool) -> Result<PackedMemory, MemoryError> {
        if self.has_pending() {
            return Err(MemoryError::PendingWrites);
        }
        let dims = self.header.dims;
        let mut header = self.header.clone();
        header.state = MemoryState::PackedBits;
        header.valid = false;
        let (_file, mut map) = create_file(out, &header, overwrite)?;
        let row_in = dims.beta * 4;
        let row_out = dims.packed_row_bytes();
        let src = &self.map[HEADER_LEN..];
        map[HEADER_LEN..]
            .par_chunks_mut(row_out * 1024)
            .zip(src.par_chunks(row_in * 1024))
            .for_each(|(dst, src)| {
                for (d, s) in dst.chunks_exact_mut(row_out).zip(src.chunks_exact(row_in)) {
                    pack_sums(s, dims.beta, TieRule::Positive, d);
                }
            });
        map.flush().map_err(io_err(out))?;
        header.valid = true;
        map[..HEADER_LEN].copy_from_slice(&header.to_bytes());
        map.flush_range(0, HEADER_LEN).map_err(io_err(out))?;
        drop(map);
        drop(_file);
        PackedMemory::open(out)
    }

    /// Sums several memories of identical shape and seeds into a new file.
    pub fn merge(inputs: &[&AccumMemory], out: &Path, overwrite: bool) -> Result<AccumMemory, MemoryError> {
        let first = inputs
            .first()
            .ok_or_else(|| MemoryError::Incompatible("nothing to merge".into()))?;
        for m in inputs {
            if m.has_pending() {
                return Err(MemoryError::PendingWrites);
            }
            if m.header.dims != first.header.dims {
                return Err(MemoryError::Incompatible("dimensions differ".into()));
            }
            if m.header.seeds != first.header.seeds {
                return Err(MemoryError::Incompatible("seeds differ".into()));
            }
            if m.header.encoder != first.header.encoder {
                return Err(MemoryError::Incompatible("encoder dims differ".into()));
            }
        }
        let mut header = first.header.clone();
        header.records_consumed = inputs.iter().map(|m| m.header.records_consumed).sum();
        header.valid = false;
        let (file, mut map) = create_file(out, &header, overwrite)?;
        let data = &mut map[HEADER_LEN..];
        for m in inputs {
            let src = &m.map[HEADER_LEN..];
            let overflow = data
                .par_chunks_mut(1 << 20)
                .zip(src.par_chunks(1 << 20))
                .map(|(dst, src)| {
                    for (d, s) in dst.chunks_exact_mut(4).zip(src.chunks_exact(4)) {
                        let a = i32::from_le_bytes(d.try_into().unwrap());
                        let b = i32::from_le_bytes(s.try_into().unwrap());
                        match a.checked_add(b) {
                            Some(v) => d.copy_from_slice(&v.to_le_bytes()),
                            None => return true,
                        }
                    }
                    false
                })
                .reduce(|| false, |a, b| a || b);
            if overflow {
                return Err(HdError::Overflow { index: 0 }.into());
            }
        }
        map.flush().map_err(io_err(out))?;
        header.valid = true;
        map[..HEADER_LEN].copy_from_slice(&header.to_bytes());
        map.flush_range(0, HEADER_LEN).map_err(io_err(out))?;
        Ok(AccumMemory {
            path: out.to_path_buf(),
            _file: file,
            map,
            header,
            pending: BTreeMap::new(),
        })
    }
}

fn verify_journal(journal: &Path) -> Result<(), MemoryError> {
    let file = File::open(journal).map_err(io_err(journal))?;
    let len = file.metadata().map_err(io_err(journal))?.len();
    if len < 32 + 32 {
        return Err(MemoryError::Journal("too short".into()));
    }
    let mut r = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut remaining = len - 32;
    let mut buf = vec![0u8; 1 << 16];
    let mut head = [0u8; 4];
    let mut first = true;
    while remaining > 0 {
        let n = remaining.min(buf.len() as u64) as usize;
        r.read_exact(&mut buf[..n]).map_err(io_err(journal))?;
        if first {
            head.copy_from_slice(&buf[..4]);
            first = false;
        }
        hasher.update(&buf[..n]);
        remaining -= n as u64;
    }
    if &head != JOURNAL_MAGIC {
        return Err(MemoryError::Journal("bad magic".into()));
    }
    let mut stored = [0u8; 32];
    r.read_exact(&mut stored).map_err(io_err(journal))?;
    if hasher.finalize().as_slice() != stored {
        return Err(MemoryError::Journal("checksum mismatch".into()));
    }
    Ok(())
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> HashingWriter<W> {
    fn new(inner: W) -> Self {
        Self {
            inner,
            hasher: Sha256::new(),
        }
    }

    fn finish(self) -> (W, [u8; 32]) {
        (self.inner, self.hasher.finalize().into())
    }
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// A binarized, bit-packed memory. Read-only.
pub struct PackedMemory {
    path: PathBuf,
    map: Mmap,
    header: Header,
}

impl std::fmt::Debug for PackedMemory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PackedMemory")
            .field("path", &self.path)
            .field("header", &self.header)
            .finish()
    }
}

impl PackedMemory {
    pub fn open(path: &Path) -> Result<Self, MemoryError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut raw = [0u8; HEADER_LEN];
        (&file).read_exact(&mut raw).map_err(io_err(path))?;
        let header = Header::from_bytes(&raw)?;
        if header.state != MemoryState::PackedBits {
            return Err(MemoryError::WrongState {
                expected: MemoryState::PackedBits,
                found: header.state,
            });
        }
        if !header.valid {
            return Err(MemoryError::Incomplete);
        }
        let len = file.metadata().map_err(io_err(path))?.len();
        check_length(path, &header, len)?;
        // SAFETY: packed memories are never modified after the validity flag
        // is set.
        let map = unsafe { Mmap::map(&file) }.map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            map,
            header,
        })
    }

    /// Writes a packed memory directly, one position slice at a time.
    /// `fill(position, slice)` receives the `|V| × ⌈β/8⌉` block of each
    /// position; padding bits are cleared afterwards.
    pub fn build(
        path: &Path,
        dims: MemoryDims,
        seeds: Seeds,
        encoder: EncoderDims,
        overwrite: bool,
        mut fill: impl FnMut(usize, &mut [u8]),
    ) -> Result<Self, MemoryError> {
        let mut header = Header {
            version: FORMAT_VERSION,
            state: MemoryState::PackedBits,
            dims,
            seeds,
            records_consumed: 0,
            valid: false,
            encoder,
        };
        let (file, mut map) = create_file(path, &header, overwrite)?;
        let slice_bytes = dims.vocab_size * dims.packed_row_bytes();
        for (i, slice) in map[HEADER_LEN..].chunks_exact_mut(slice_bytes).enumerate() {
            fill(i + 1, slice);
            for row in slice.chunks_exact_mut(dims.packed_row_bytes()) {
                clear_padding(row, dims.beta);
            }
        }
        map.flush().map_err(io_err(path))?;
        header.valid = true;
        map[..HEADER_LEN].copy_from_slice(&header.to_bytes());
        map.flush_range(0, HEADER_LEN).map_err(io_err(path))?;
        drop(map);
        drop(file);
        Self::open(path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn dims(&self) -> MemoryDims {
        self.header.dims
    }

    pub fn seeds(&self) -> Seeds {
        self.header.seeds
    }

    /// The `|V|` packed prototypes of one position, without copying.
    pub fn slice(&self, position: usize) -> Result<PackedRows<'_>, MemoryError> {
        let dims = self.header.dims;
        dims.check_cell(position, 0)?;
        let slice_bytes = dims.vocab_size * dims.packed_row_bytes();
        let off = HEADER_LEN + (position - 1) * slice_bytes;
        Ok(PackedRows::new(dims.beta, &self.map[off..off + slice_bytes])?)
    }

    pub fn row(&self, position: usize, token: usize) -> Result<PackedHypervector, MemoryError> {
        self.header.dims.check_cell(position, token)?;
        Ok(self.slice(position)?.row_vector(token))
    }

    /// Bytes of the data region, for byte-level comparisons.
    pub fn data(&self) -> &[u8] {
        &self.map[HEADER_LEN..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dims() -> MemoryDims {
        MemoryDims::new(4, 8, 64).unwrap()
    }

    fn create(dir: &tempfile::TempDir, name: &str) -> AccumMemory {
        AccumMemory::create(
            &dir.path().join(name),
            toy_dims(),
            Seeds::from_master(1),
            EncoderDims::default(),
            false,
        )
        .unwrap()
    }

    #[test]
    fn size_arithmetic() {
        let toy = MemoryDims::new(8, 64, 4096).unwrap();
        assert_eq!(toy.accum_data_len(), Some(8 * 1024 * 1024));
        let big = MemoryDims::new(41, 152_000, 50_000).unwrap();
        let tb = big.accum_data_len().unwrap() as f64 / 1e12;
        assert!((tb - 1.2464).abs() < 1e-3, "{tb}");
        let mid = MemoryDims::new(21, 152_000, 50_000).unwrap();
        let gb = mid.accum_data_len().unwrap() as f64 / 1e9;
        assert!((gb - 638.4).abs() < 0.1, "{gb}");
        assert_eq!(big.packed_row_bytes(), 6250);
        assert!(MemoryDims::new(0, 1, 1).is_err());
    }

    #[test]
    fn header_round_trip_and_layout() {
        let h = Header {
            version: FORMAT_VERSION,
            state: MemoryState::PackedBits,
            dims: MemoryDims::new(41, 152_000, 50_000).unwrap(),
            seeds: Seeds::from_master(7),
            records_consumed: 12345,
            valid: true,
            encoder: EncoderDims { n_p: 1025, d_i: 2048, d_c: 2560 },
        };
        let b = h.to_bytes();
        assert_eq!(&b[0..4], b"HDFP");
        assert_eq!(b[8], 1);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 41);
        assert_eq!(u64::from_le_bytes(b[72..80].try_into().unwrap()), 12345);
        assert_eq!(b[80], 1);
        assert_eq!(Header::from_bytes(&b).unwrap(), h);
        let mut bad = b;
        bad[0] = b'X';
        assert!(matches!(Header::from_bytes(&bad), Err(MemoryError::BadMagic)));
    }

    #[test]
    fn create_refuses_existing_without_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let m = create(&dir, "p.hdfp");
        drop(m);
        let again = AccumMemory::create(
            &dir.path().join("p.hdfp"),
            toy_dims(),
            Seeds::from_master(1),
            EncoderDims::default(),
            false,
        );
        assert!(matches!(again, Err(MemoryError::Exists(_))));
        let len = fs::metadata(dir.path().join("p.hdfp")).unwrap().len();
        assert_eq!(len, HEADER_LEN as u64 + 4 * 8 * 64 * 4);
    }

    #[test]
    fn second_writer_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let _m = create(&dir, "p.hdfp");
        assert!(matches!(
            AccumMemory::open(&dir.path().join("p.hdfp")),
            Err(MemoryError::Locked(_))
        ));
    }

    #[test]
    fn accumulate_and_cancel() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = create(&dir, "p.hdfp");
        let v = Hypervector::random(64, &mut ChaCha8Rng::seed_from_u64(1));
        m.accumulate(2, 3, &v).unwrap();
        let as_i32: Vec<i32> = v.as_slice().iter().map(|&c| c as i32).collect();
        assert_eq!(m.row(2, 3).unwrap().as_slice(), as_i32.as_slice());
        m.flush(1).unwrap();
        assert_eq!(m.committed_row(2, 3).unwrap().as_slice(), as_i32.as_slice());
        m.accumulate(2, 3, &v.negated()).unwrap();
        m.flush(2).unwrap();
        assert_eq!(m.committed_row(2, 3).unwrap(), AccumVector::zeros(64));
    }

    #[test]
    fn accumulate_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = create(&dir, "p.hdfp");
        let v = Hypervector::ones(64);
        assert!(matches!(m.accumulate(1, 0, &v), Err(MemoryError::ReservedPosition)));
        assert!(matches!(m.accumulate(5, 0, &v), Err(MemoryError::PositionOutOfRange { .. })));
        assert!(matches!(m.accumulate(2, 8, &v), Err(MemoryError::TokenOutOfRange { .. })));
        assert!(matches!(
            m.accumulate(2, 0, &Hypervector::ones(63)),
            Err(MemoryError::Hd(HdError::DimensionMismatch { .. }))
        ));
        m.flush(3).unwrap();
        assert!(matches!(m.flush(2), Err(MemoryError::CountRegression { .. })));
    }

    #[test]
    fn order_independence() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let ops: Vec<(usize, usize, Hypervector)> = (0..40)
            .map(|i| (2 + i % 3, (i * 5) % 8, Hypervector::random(64, &mut r)))
            .collect();
        let mut a = create(&dir, "a.hdfp");
        for (p, t, v) in &ops {
            a.accumulate(*p, *t, v).unwrap();
        }
        a.flush(40).unwrap();
        let mut b = create(&dir, "b.hdfp");
        for (i, (p, t, v)) in ops.iter().rev().enumerate() {
            b.accumulate(*p, *t, v).unwrap();
            if i % 7 == 6 {
                b.flush(i as u64).unwrap();
            }
        }
        b.flush(40).unwrap();
        drop((a, b));
        assert_eq!(
            fs::read(dir.path().join("a.hdfp")).unwrap(),
            fs::read(dir.path().join("b.hdfp")).unwrap()
        );
    }

    #[test]
    fn unflushed_writes_are_lost_on_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.hdfp");
        let mut m = create(&dir, "p.hdfp");
        let v = Hypervector::ones(64);
        m.accumulate(2, 0, &v).unwrap();
        m.flush(10).unwrap();
        m.flush(10).unwrap();
        m.accumulate(3, 1, &v).unwrap();
        drop(m);
        let m = AccumMemory::open(&path).unwrap();
        assert_eq!(m.records_consumed(), 10);
        assert_eq!(m.committed_row(2, 0).unwrap().as_slice(), &[1; 64]);
        assert_eq!(m.committed_row(3, 1).unwrap(), AccumVector::zeros(64));
    }

    #[test]
    fn crash_mid_apply_recovers_from_journal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.hdfp");
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut m = create(&dir, "p.hdfp");
        let vs: Vec<Hypervector> = (0..6).map(|_| Hypervector::random(64, &mut r)).collect();
        for (i, v) in vs.iter().enumerate() {
            m.accumulate(2 + i % 2, i, v).unwrap();
        }
        m.flush(6).unwrap();
        let expected = fs::read(&path).unwrap();
        drop(m);

        // Same updates again on a fresh file, but stop halfway through
        // applying the journal.
        let mut m = AccumMemory::create(&path, toy_dims(), Seeds::from_master(1), EncoderDims::default(), true).unwrap();
        for (i, v) in vs.iter().enumerate() {
            m.accumulate(2 + i % 2, i, v).unwrap();
        }
        let journal = m.write_journal(6).unwrap();
        let off = m.row_offset(2, 0);
        m.map[off..off + 8].copy_from_slice(&[9u8; 8]);
        let torn = m.row(2, 0).unwrap();
        assert_ne!(torn, m.committed_row(3, 5).unwrap());
        drop(m);
        assert!(journal.exists());

        let m = AccumMemory::open(&path).unwrap();
        assert!(!journal.exists());
        assert_eq!(m.records_consumed(), 6);
        drop(m);
        assert_eq!(fs::read(&path).unwrap(), expected);
    }

    #[test]
    fn corrupt_journal_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.hdfp");
        let mut m = create(&dir, "p.hdfp");
        m.accumulate(2, 0, &Hypervector::ones(64)).unwrap();
        let journal = m.write_journal(1).unwrap();
        drop(m);
        let mut bytes = fs::read(&journal).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        fs::write(&journal, bytes).unwrap();
        assert!(matches!(AccumMemory::open(&path), Err(MemoryError::Journal(_))));
    }

    #[test]
    fn binarize_pack_matches_rowwise_binarize() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut m = create(&dir, "p.hdfp");
        for i in 0..50 {
            let v = Hypervector::random(64, &mut r);
            m.accumulate(2 + i % 3, (i * 3) % 8, &v).unwrap();
        }
        m.flush(50).unwrap();
        let packed = m.binarize_pack(&dir.path().join("p.bits"), false).unwrap();
        assert_eq!(packed.header().state, MemoryState::PackedBits);
        assert_eq!(packed.header().records_consumed, 50);
        for p in 1..=4 {
            for t in 0..8 {
                let expected = m.committed_row(p, t).unwrap().binarize(TieRule::Positive).pack();
                assert_eq!(packed.row(p, t).unwrap(), expected);
                assert_eq!(packed.slice(p).unwrap().row_vector(t), expected);
            }
        }
        assert!(packed.slice(5).is_err());
        assert!(matches!(
            AccumMemory::open(&dir.path().join("p.bits")),
            Err(MemoryError::WrongState { .. })
        ));
    }

    #[test]
    fn binarize_row_with_tie() {
        let mut out = [0u8; 1];
        let sums: Vec<u8> = [5i32, -1, 0, 7].iter().flat_map(|s| s.to_le_bytes()).collect();
        pack_sums(&sums, 4, TieRule::Positive, &mut out);
        assert_eq!(out[0], 0b1101);
    }

    #[test]
    fn incomplete_packed_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bits");
        let header = Header {
            version: FORMAT_VERSION,
            state: MemoryState::PackedBits,
            dims: toy_dims(),
            seeds: Seeds::from_master(1),
            records_consumed: 0,
            valid: false,
            encoder: EncoderDims::default(),
        };
        drop(create_file(&path, &header, false).unwrap());
        assert!(matches!(PackedMemory::open(&path), Err(MemoryError::Incomplete)));
    }

    #[test]
    fn merge_sums_memories() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut a = create(&dir, "a.hdfp");
        let mut b = create(&dir, "b.hdfp");
        let mut full = create(&dir, "full.hdfp");
        for i in 0..30 {
            let v = Hypervector::random(64, &mut r);
            let (p, t) = (2 + i % 3, i % 8);
            if i % 2 == 0 { a.accumulate(p, t, &v).unwrap() } else { b.accumulate(p, t, &v).unwrap() }
            full.accumulate(p, t, &v).unwrap();
        }
        a.flush(15).unwrap();
        b.flush(15).unwrap();
        full.flush(30).unwrap();
        let merged = AccumMemory::merge(&[&a, &b], &dir.path().join("m.hdfp"), false).unwrap();
        assert_eq!(merged.records_consumed(), 30);
        drop((merged, full));
        assert_eq!(
            fs::read(dir.path().join("m.hdfp")).unwrap(),
            fs::read(dir.path().join("full.hdfp")).unwrap()
        );
    }

    #[test]
    fn packed_build_clears_padding() {
        let dir = tempfile::tempdir().unwrap();
        let dims = MemoryDims::new(2, 3, 13).unwrap();
        let m = PackedMemory::build(
            &dir.path().join("b.bits"),
            dims,
            Seeds::from_master(2),
            EncoderDims::default(),
            false,
            |_, slice| slice.fill(0xFF),
        )
        .unwrap();
        let row = m.row(2, 1).unwrap();
        assert_eq!(row.bytes(), &[0xFF, 0x1F]);
        assert_eq!(row.unpack(), Hypervector::ones(13));
    }
}
