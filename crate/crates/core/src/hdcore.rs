//! Bipolar hypervector algebra.
//!
//! Hypervectors live in `{-1, +1}^β`. Binding is componentwise
//! multiplication, bundling is an integer sum followed by a sign, and
//! similarity is Hamming distance. For retrieval the vectors are packed
//! eight components per byte (bit set for `+1`), which turns Hamming
//! distance into XOR plus popcount.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HdError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("component {index} is {value}, expected -1 or +1")]
    NotBipolar { index: usize, value: i8 },
    #[error("accumulator overflow at component {index}")]
    Overflow { index: usize },
    #[error("packed vector of {dims} dims needs {expected} bytes, got {found}")]
    PackedLength {
        dims: usize,
        expected: usize,
        found: usize,
    },
    #[error("packed vector has non-zero padding bits")]
    PackedPadding,
    #[error("hypervectors must have at least one component")]
    Empty,
}

fn check_dims(expected: usize, found: usize) -> Result<(), HdError> {
    if expected != found {
        return Err(HdError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// How an exact zero is resolved when taking the sign of an accumulator
/// component or a projection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    #[default]
    Positive,
    Negative,
}

impl TieRule {
    #[inline]
    pub fn sign_i64(self, value: i64) -> i8 {
        match value.cmp(&0) {
            std::cmp::Ordering::Greater => 1,
            std::cmp::Ordering::Less => -1,
            std::cmp::Ordering::Equal => self.zero(),
        }
    }

    #[inline]
    pub fn sign_f32(self, value: f32) -> i8 {
        if value > 0.0 {
            1
        } else if value < 0.0 {
            -1
        } else {
            self.zero()
        }
    }

    #[inline]
    pub fn zero(self) -> i8 {
        match self {
            TieRule::Positive => 1,
            TieRule::Negative => -1,
        }
    }
}

/// A bipolar hypervector, one signed byte per component.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Hypervector {
    components: Vec<i8>,
}

impl std::fmt::Debug for Hypervector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let head: Vec<i8> = self.components.iter().take(8).copied().collect();
        f.debug_struct("Hypervector")
            .field("dims", &self.dims())
            .field("head", &head)
            .finish()
    }
}

impl Hypervector {
    pub fn from_components(components: Vec<i8>) -> Result<Self, HdError> {
        if components.is_empty() {
            return Err(HdError::Empty);
        }
        if let Some((index, &value)) = components
            .iter()
            .enumerate()
            .find(|(_, &c)| c != 1 && c != -1)
        {
            return Err(HdError::NotBipolar { index, value });
        }
        Ok(Self { components })
    }

    /// Caller guarantees every component is ±1.
    pub(crate) fn from_components_unchecked(components: Vec<i8>) -> Self {
        debug_assert!(components.iter().all(|&c| c == 1 || c == -1));
        Self { components }
    }

    pub fn filled(dims: usize, value: i8) -> Self {
        assert!(value == 1 || value == -1, "fill value must be bipolar");
        Self {
            components: vec![value; dims],
        }
    }

    /// The binding identity.
    pub fn ones(dims: usize) -> Self {
        Self::filled(dims, 1)
    }

    /// Uniform random components, 64 per draw from `rng`.
    pub fn random<R: Rng + ?Sized>(dims: usize, rng: &mut R) -> Self {
        let mut components = Vec::with_capacity(dims);
        while components.len() < dims {
            let word: u64 = rng.gen();
            let take = (dims - components.len()).min(64);
            components.extend((0..take).map(|bit| if (word >> bit) & 1 == 1 { 1 } else { -1 }));
        }
        Self { components }
    }

    #[inline]
    pub fn dims(&self) -> usize {
        self.components.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[i8] {
        &self.components
    }

    pub fn into_components(self) -> Vec<i8> {
        self.components
    }

    /// Every component flipped; equal to binding with the all-−1 vector.
    pub fn negated(&self) -> Self {
        Self {
            components: self.components.iter().map(|&c| -c).collect(),
        }
    }

    pub fn bind(&self, other: &Hypervector) -> Result<Hypervector, HdError> {
        check_dims(self.dims(), other.dims())?;
        Ok(Self {
            components: self
                .components
                .iter()
                .zip(&other.components)
                .map(|(&a, &b)| a * b)
                .collect(),
        })
    }

    /// Number of positions where the two vectors disagree.
    pub fn hamming(&self, other: &Hypervector) -> Result<usize, HdError> {
        check_dims(self.dims(), other.dims())?;
        Ok(self
            .components
            .iter()
            .zip(&other.components)
            .filter(|(a, b)| a != b)
            .count())
    }

    pub fn normalized_hamming(&self, other: &Hypervector) -> Result<f64, HdError> {
        Ok(self.hamming(other)? as f64 / self.dims() as f64)
    }

    pub fn pack(&self) -> PackedHypervector {
        let mut bytes = vec![0u8; packed_len(self.dims())];
        for (byte, chunk) in bytes.iter_mut().zip(self.components.chunks(8)) {
            for (bit, &c) in chunk.iter().enumerate() {
                if c > 0 {
                    *byte |= 1 << bit;
                }
            }
        }
        PackedHypervector {
            dims: self.dims(),
            bytes,
        }
    }
}

/// Free-function form of [`Hypervector::bind`].
pub fn bind(a: &Hypervector, b: &Hypervector) -> Result<Hypervector, HdError> {
    a.bind(b)
}

/// Free-function form of [`Hypervector::hamming`].
pub fn hamming(a: &Hypervector, b: &Hypervector) -> Result<usize, HdError> {
    a.hamming(b)
}

/// Running integer sum of bipolar vectors (the bundling accumulator).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccumVector {
    sums: Vec<i32>,
}

impl AccumVector {
    pub fn zeros(dims: usize) -> Self {
        Self {
            sums: vec![0; dims],
        }
    }

    pub fn from_sums(sums: Vec<i32>) -> Self {
        Self { sums }
    }

    #[inline]
    pub fn dims(&self) -> usize {
        self.sums.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[i32] {
        &self.sums
    }

    pub fn into_sums(self) -> Vec<i32> {
        self.sums
    }

    /// Adds `v` componentwise. On overflow the accumulator is left unchanged.
    pub fn accumulate(&mut self, v: &Hypervector) -> Result<(), HdError> {
        check_dims(self.dims(), v.dims())?;
        self.add_with(|k| v.components[k] as i32)
    }

    pub fn accumulate_packed(&mut self, v: &PackedHypervector) -> Result<(), HdError> {
        check_dims(self.dims(), v.dims())?;
        self.add_with(|k| if (v.bytes[k / 8] >> (k % 8)) & 1 == 1 { 1 } else { -1 })
    }

    pub fn add_assign(&mut self, other: &AccumVector) -> Result<(), HdError> {
        check_dims(self.dims(), other.dims())?;
        self.add_with(|k| other.sums[k])
    }

    fn add_with(&mut self, term: impl Fn(usize) -> i32) -> Result<(), HdError> {
        for k in 0..self.sums.len() {
            match self.sums[k].checked_add(term(k)) {
                Some(s) => self.sums[k] = s,
                None => {
                    for j in 0..k {
                        self.sums[j] -= term(j);
                    }
                    return Err(HdError::Overflow { index: k });
                }
            }
        }
        Ok(())
    }

    pub fn binarize(&self, tie: TieRule) -> Hypervector {
        Hypervector {
            components: self
                .sums
                .iter()
                .map(|&s| tie.sign_i64(s as i64))
                .collect(),
        }
    }
}

/// Bundles a set of hypervectors: integer sum followed by sign.
pub fn bundle<'a, I>(dims: usize, vectors: I, tie: TieRule) -> Result<Hypervector, HdError>
where
    I: IntoIterator<Item = &'a Hypervector>,
{
    let mut acc = AccumVector::zeros(dims);
    for v in vectors {
        acc.accumulate(v)?;
    }
    Ok(acc.binarize(tie))
}

#[inline]
pub fn packed_len(dims: usize) -> usize {
    dims.div_ceil(8)
}

/// Sets the padding bits of a packed row (beyond `dims`) to zero.
pub(crate) fn clear_padding(row: &mut [u8], dims: usize) {
    let rem = dims % 8;
    if rem != 0 {
        if let Some(last) = row.last_mut() {
            *last &= (1u8 << rem) - 1;
        }
    }
}

/// A hypervector stored eight components per byte. Bit `k` of byte `j` is
/// component `8j + k`; `+1` is a set bit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedHypervector {
    dims: usize,
    bytes: Vec<u8>,
}

impl PackedHypervector {
    pub fn from_bytes(dims: usize, bytes: Vec<u8>) -> Result<Self, HdError> {
        if dims == 0 {
            return Err(HdError::Empty);
        }
        let expected = packed_len(dims);
        if bytes.len() != expected {
            return Err(HdError::PackedLength {
                dims,
                expected,
                found: bytes.len(),
            });
        }
        let mut cleared = bytes.clone();
        clear_padding(&mut cleared, dims);
        if cleared != bytes {
            return Err(HdError::PackedPadding);
        }
        Ok(Self { dims, bytes })
    }

    #[inline]
    pub fn dims(&self) -> usize {
        self.dims
    }

    #[inline]
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn unpack(&self) -> Hypervector {
        let components = (0..self.dims)
            .map(|k| if (self.bytes[k / 8] >> (k % 8)) & 1 == 1 { 1 } else { -1 })
            .collect();
        Hypervector { components }
    }

    pub fn hamming(&self, other: &PackedHypervector) -> Result<usize, HdError> {
        check_dims(self.dims, other.dims)?;
        Ok(xor_popcount(&self.bytes, &other.bytes) as usize)
    }
}

/// Bit counts for every byte value.
#[derive(Clone)]
pub struct PopcountLut {
    table: [u8; 256],
}

impl PopcountLut {
    pub const fn new() -> Self {
        let mut table = [0u8; 256];
        let mut v = 1;
        while v < 256 {
            table[v] = table[v >> 1] + (v & 1) as u8;
            v += 1;
        }
        Self { table }
    }

    #[inline]
    pub fn count(&self, byte: u8) -> u8 {
        self.table[byte as usize]
    }

    pub fn table(&self) -> &[u8; 256] {
        &self.table
    }
}

impl Default for PopcountLut {
    fn default() -> Self {
        Self::new()
    }
}

pub static POPCOUNT_LUT: PopcountLut = PopcountLut::new();

/// Hamming distance by table lookup over XOR-ed bytes.
pub fn hamming_packed(
    a: &PackedHypervector,
    b: &PackedHypervector,
    lut: &PopcountLut,
) -> Result<usize, HdError> {
    check_dims(a.dims, b.dims)?;
    Ok(a.bytes
        .iter()
        .zip(&b.bytes)
        .map(|(&x, &y)| lut.count(x ^ y) as usize)
        .sum())
}

#[inline(always)]
fn xor_popcount_words(a: &[u8], b: &[u8]) -> u32 {
    let mut total = 0u32;
    let mut wa = a.chunks_exact(8);
    let mut wb = b.chunks_exact(8);
    for (x, y) in (&mut wa).zip(&mut wb) {
        let x = u64::from_le_bytes(x.try_into().unwrap());
        let y = u64::from_le_bytes(y.try_into().unwrap());
        total += (x ^ y).count_ones();
    }
    for (&x, &y) in wa.remainder().iter().zip(wb.remainder()) {
        total += (x ^ y).count_ones();
    }
    total
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn xor_popcount_batch_popcnt(rows: &[u8], row_bytes: usize, query: &[u8], out: &mut [u32]) {
    for (row, slot) in rows.chunks_exact(row_bytes).zip(out.iter_mut()) {
        *slot = xor_popcount_words(row, query);
    }
}

fn xor_popcount_batch(rows: &[u8], row_bytes: usize, query: &[u8], out: &mut [u32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("popcnt") {
            // SAFETY: the CPU supports popcnt, checked just above.
            unsafe { xor_popcount_batch_popcnt(rows, row_bytes, query, out) };
            return;
        }
    }
    for (row, slot) in rows.chunks_exact(row_bytes).zip(out.iter_mut()) {
        *slot = xor_popcount_words(row, query);
    }
}

/// Popcount of `a XOR b` using 64-bit words.
pub fn xor_popcount(a: &[u8], b: &[u8]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    let mut out = [0u32];
    xor_popcount_batch(a, a.len().max(1), b, &mut out);
    if a.is_empty() {
        0
    } else {
        out[0]
    }
}

/// A contiguous block of packed rows sharing one dimensionality, such as
/// the vocabulary slice of one position in a packed prototype memory.
#[derive(Debug, Clone, Copy)]
pub struct PackedRows<'a> {
    dims: usize,
    data: &'a [u8],
}

impl<'a> PackedRows<'a> {
    pub fn new(dims: usize, data: &'a [u8]) -> Result<Self, HdError> {
        if dims == 0 {
            return Err(HdError::Empty);
        }
        let row_bytes = packed_len(dims);
        if data.len() % row_bytes != 0 {
            return Err(HdError::PackedLength {
                dims,
                expected: row_bytes * (data.len() / row_bytes + 1),
                found: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> usize {
        self.dims
    }

    #[inline]
    pub fn row_bytes(&self) -> usize {
        packed_len(self.dims)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.row_bytes()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, index: usize) -> &'a [u8] {
        let rb = self.row_bytes();
        &self.data[index * rb..(index + 1) * rb]
    }

    pub fn row_vector(&self, index: usize) -> PackedHypervector {
        PackedHypervector {
            dims: self.dims,
            bytes: self.row(index).to_vec(),
        }
    }

    pub fn as_bytes(&self) -> &'a [u8] {
        self.data
    }
}

/// Default working-set budget for one chunk of [`hamming_batch_chunked`].
pub const DEFAULT_BATCH_CHUNK_BYTES: usize = 1 << 20;

/// Hamming distance from `query` to every row.
pub fn hamming_batch(rows: PackedRows<'_>, query: &PackedHypervector) -> Result<Vec<u32>, HdError> {
    let chunk_rows = (DEFAULT_BATCH_CHUNK_BYTES / rows.row_bytes()).max(1);
    hamming_batch_chunked(rows, query, chunk_rows)
}

/// As [`hamming_batch`] with an explicit chunk size in rows. Chunks are
/// scored in parallel; the output does not depend on `chunk_rows`.
pub fn hamming_batch_chunked(
    rows: PackedRows<'_>,
    query: &PackedHypervector,
    chunk_rows: usize,
) -> Result<Vec<u32>, HdError> {
    check_dims(rows.dims(), query.dims())?;
    let row_bytes = rows.row_bytes();
    let chunk_rows = chunk_rows.max(1);
    let mut out = vec![0u32; rows.len()];
    out.par_chunks_mut(chunk_rows)
        .zip(rows.as_bytes().par_chunks(chunk_rows * row_bytes))
        .for_each(|(dst, src)| xor_popcount_batch(src, row_bytes, query.bytes(), dst));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn hv_strategy(dims: usize) -> impl Strategy<Value = Hypervector> {
        proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], dims)
            .prop_map(|c| Hypervector::from_components(c).unwrap())
    }

    #[test]
    fn bind_with_self_is_identity_vector() {
        let a = Hypervector::random(1000, &mut rng(1));
        assert_eq!(a.bind(&a).unwrap(), Hypervector::ones(1000));
        let b = Hypervector::random(1000, &mut rng(2));
        assert_eq!(Hypervector::ones(1000).bind(&b).unwrap(), b);
    }

    #[test]
    fn bind_is_near_orthogonal_to_inputs() {
        let mut r = rng(3);
        let a = Hypervector::random(50_000, &mut r);
        let b = Hypervector::random(50_000, &mut r);
        let c = a.bind(&b).unwrap();
        let d = c.normalized_hamming(&a).unwrap();
        assert!((0.49..=0.51).contains(&d), "{d}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let a = Hypervector::ones(8);
        let b = Hypervector::ones(9);
        assert_eq!(
            a.bind(&b),
            Err(HdError::DimensionMismatch {
                expected: 8,
                found: 9
            })
        );
        assert!(a.hamming(&b).is_err());
        assert!(AccumVector::zeros(8).accumulate(&b).is_err());
        assert!(a.pack().hamming(&b.pack()).is_err());
    }

    #[test]
    fn non_bipolar_components_are_rejected() {
        assert_eq!(
            Hypervector::from_components(vec![1, 0, -1]),
            Err(HdError::NotBipolar { index: 1, value: 0 })
        );
        assert_eq!(Hypervector::from_components(vec![]), Err(HdError::Empty));
    }

    #[test]
    fn accumulate_then_cancel() {
        let v = Hypervector::random(257, &mut rng(4));
        let mut acc = AccumVector::zeros(257);
        acc.accumulate(&v).unwrap();
        assert_eq!(
            acc.as_slice(),
            v.as_slice().iter().map(|&c| c as i32).collect::<Vec<_>>().as_slice()
        );
        assert_eq!(acc.binarize(TieRule::Positive), v);
        acc.accumulate(&v.negated()).unwrap();
        assert_eq!(acc, AccumVector::zeros(257));
    }

    #[test]
    fn accumulate_overflow_is_an_error_and_leaves_state() {
        let mut acc = AccumVector::from_sums(vec![0, i32::MAX, 5]);
        let before = acc.clone();
        let v = Hypervector::ones(3);
        assert_eq!(acc.accumulate(&v), Err(HdError::Overflow { index: 1 }));
        assert_eq!(acc, before);
    }

    #[test]
    fn binarize_applies_tie_rule() {
        let acc = AccumVector::from_sums(vec![3, -2, 0]);
        assert_eq!(acc.binarize(TieRule::Positive).as_slice(), &[1, -1, 1]);
        assert_eq!(acc.binarize(TieRule::Negative).as_slice(), &[1, -1, -1]);
    }

    #[test]
    fn odd_bundle_has_no_ties() {
        let mut r = rng(5);
        let vs: Vec<_> = (0..1025).map(|_| Hypervector::random(512, &mut r)).collect();
        let mut acc = AccumVector::zeros(512);
        for v in &vs {
            acc.accumulate(v).unwrap();
        }
        assert!(acc.as_slice().iter().all(|&s| s != 0 && s % 2 != 0));
        assert_eq!(acc.binarize(TieRule::Positive), acc.binarize(TieRule::Negative));
    }

    #[test]
    fn bundle_of_three_stays_close_to_member() {
        let mut r = rng(6);
        let vs: Vec<_> = (0..3).map(|_| Hypervector::random(50_000, &mut r)).collect();
        let b = bundle(50_000, &vs, TieRule::Positive).unwrap();
        assert!(b.normalized_hamming(&vs[0]).unwrap() < 0.5);
    }

    #[test]
    fn bundle_membership_statistics() {
        // m ≤ 33 members, threshold 0.5 − 3/√β, 100 trials.
        let beta = 50_000usize;
        let threshold = 0.5 - 3.0 / (beta as f64).sqrt();
        let mut r = rng(7);
        for trial in 0..100 {
            let m = 1 + trial % 33;
            let vs: Vec<_> = (0..m).map(|_| Hypervector::random(beta, &mut r)).collect();
            let b = bundle(beta, &vs, TieRule::Positive).unwrap();
            for v in &vs {
                let d = b.normalized_hamming(v).unwrap();
                assert!(d < threshold, "m={m} d={d}");
            }
        }
    }

    #[test]
    fn pack_known_bytes() {
        assert_eq!(Hypervector::ones(8).pack().bytes(), &[0xFF]);
        assert_eq!(Hypervector::filled(8, -1).pack().bytes(), &[0x00]);
        let v = Hypervector::from_components(vec![1, -1, 1]).unwrap();
        assert_eq!(v.pack().bytes(), &[0b101]);
    }

    #[test]
    fn pack_round_trip_large() {
        let v = Hypervector::random(50_000, &mut rng(8));
        let p = v.pack();
        assert_eq!(p.bytes().len(), 6250);
        assert_eq!(p.unpack(), v);
    }

    #[test]
    fn packed_padding_must_be_zero() {
        assert_eq!(
            PackedHypervector::from_bytes(3, vec![0b1000]),
            Err(HdError::PackedPadding)
        );
        assert!(PackedHypervector::from_bytes(3, vec![0b111]).is_ok());
        assert!(matches!(
            PackedHypervector::from_bytes(9, vec![0]),
            Err(HdError::PackedLength { .. })
        ));
    }

    #[test]
    fn lut_is_exhaustively_correct() {
        let lut = PopcountLut::new();
        assert_eq!(lut.count(0), 0);
        assert_eq!(lut.count(255), 8);
        assert_eq!(lut.count(0b1010_1010), 4);
        for v in 0..=255u8 {
            assert_eq!(lut.count(v) as u32, v.count_ones());
        }
    }

    #[test]
    fn full_flip_distance_is_beta() {
        let v = Hypervector::random(1001, &mut rng(9));
        assert_eq!(v.hamming(&v).unwrap(), 0);
        assert_eq!(v.hamming(&v.negated()).unwrap(), 1001);
        assert_eq!(
            hamming_packed(&v.pack(), &v.negated().pack(), &POPCOUNT_LUT).unwrap(),
            1001
        );
    }

    #[test]
    fn packed_equals_unpacked_on_random_pairs() {
        let mut r = rng(10);
        for i in 0..1000 {
            let dims = 1 + (i * 37) % 3000;
            let a = Hypervector::random(dims, &mut r);
            let b = Hypervector::random(dims, &mut r);
            let exact = a.hamming(&b).unwrap();
            assert_eq!(hamming_packed(&a.pack(), &b.pack(), &POPCOUNT_LUT).unwrap(), exact);
            assert_eq!(a.pack().hamming(&b.pack()).unwrap(), exact);
        }
    }

    #[test]
    fn batch_matches_loop_and_chunking() {
        let mut r = rng(11);
        let dims = 1003;
        let rows: Vec<Hypervector> = (0..100).map(|_| Hypervector::random(dims, &mut r)).collect();
        let data: Vec<u8> = rows.iter().flat_map(|v| v.pack().bytes().to_vec()).collect();
        let block = PackedRows::new(dims, &data).unwrap();
        let q = Hypervector::random(dims, &mut r).pack();
        let expected: Vec<u32> = rows
            .iter()
            .map(|v| hamming_packed(&v.pack(), &q, &POPCOUNT_LUT).unwrap() as u32)
            .collect();
        assert_eq!(hamming_batch(block, &q).unwrap(), expected);
        for chunk in [1, 3, 64, 1000] {
            assert_eq!(hamming_batch_chunked(block, &q, chunk).unwrap(), expected);
        }
    }

    #[test]
    fn batch_on_flip_pair() {
        let v = Hypervector::random(77, &mut rng(12));
        let data: Vec<u8> = [v.pack(), v.negated().pack()]
            .iter()
            .flat_map(|p| p.bytes().to_vec())
            .collect();
        let block = PackedRows::new(77, &data).unwrap();
        assert_eq!(hamming_batch(block, &v.pack()).unwrap(), vec![0, 77]);
        let short = Hypervector::ones(76).pack();
        assert!(hamming_batch(block, &short).is_err());
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let mut r = rng(13);
        let dims = 300;
        let rows: Vec<PackedHypervector> =
            (0..20).map(|_| Hypervector::random(dims, &mut r).pack()).collect();
        let q = Hypervector::random(dims, &mut r).pack();
        let flat = |rs: &[PackedHypervector]| rs.iter().flat_map(|p| p.bytes().to_vec()).collect::<Vec<u8>>();
        let forward = flat(&rows);
        let base = hamming_batch(PackedRows::new(dims, &forward).unwrap(), &q).unwrap();
        let mut reversed_rows = rows.clone();
        reversed_rows.reverse();
        let reversed = flat(&reversed_rows);
        let mut got = hamming_batch(PackedRows::new(dims, &reversed).unwrap(), &q).unwrap();
        got.reverse();
        assert_eq!(got, base);
    }

    proptest! {
        #[test]
        fn bind_is_self_inverse(a in hv_strategy(129), b in hv_strategy(129)) {
            prop_assert_eq!(a.bind(&b).unwrap().bind(&b).unwrap(), a);
        }

        #[test]
        fn binding_preserves_distance(a in hv_strategy(200), b in hv_strategy(200), c in hv_strategy(200)) {
            let lhs = a.bind(&c).unwrap().hamming(&b.bind(&c).unwrap()).unwrap();
            prop_assert_eq!(lhs, a.hamming(&b).unwrap());
        }

        #[test]
        fn packed_hamming_equals_unpacked(a in hv_strategy(123), b in hv_strategy(123)) {
            let exact = a.hamming(&b).unwrap();
            prop_assert_eq!(hamming_packed(&a.pack(), &b.pack(), &POPCOUNT_LUT).unwrap(), exact);
            prop_assert_eq!(a.pack().hamming(&b.pack()).unwrap(), exact);
        }

        #[test]
        fn pack_unpack_round_trip(a in hv_strategy(61)) {
            let p = a.pack();
            prop_assert_eq!(PackedHypervector::from_bytes(61, p.bytes().to_vec()).unwrap(), p.clone());
            prop_assert_eq!(p.unpack(), a);
        }
    }
}
