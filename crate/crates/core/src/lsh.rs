//! Angular (random-hyperplane) LSH from real feature vectors to bipolar
//! hypervectors.
//!
//! Component `k` of the output is the sign of `<q_k, x>` where `q_k` is a
//! standard Gaussian row. Rows are regenerated on demand from
//! `(seed, role, k)`, so only the seed has to be persisted alongside a
//! prototype memory.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hdcore::{Hypervector, TieRule};
use crate::matrix::{dot, Matrix};
use crate::rng::{counter_rng, fill_gaussian, DOMAIN_LSH_CAPTION, DOMAIN_LSH_IMAGE, DOMAIN_POSITIONAL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LshError {
    #[error("input has {found} features, projector expects {expected}")]
    InputLength { expected: usize, found: usize },
    #[error("input row {row} is all zeros")]
    ZeroInput { row: usize },
    #[error("input row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("projector dimensions must be positive")]
    EmptyDims,
}

/// Which of the two projectors a [`LshProjector`] is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorRole {
    Image,
    Caption,
}

impl ProjectorRole {
    fn domain(self) -> u64 {
        match self {
            ProjectorRole::Image => DOMAIN_LSH_IMAGE,
            ProjectorRole::Caption => DOMAIN_LSH_CAPTION,
        }
    }
}

pub const DEFAULT_BLOCK_ROWS: usize = 256;

/// Seeded projector whose Gaussian rows are generated block by block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LshProjector {
    seed: u64,
    role: ProjectorRole,
    input_dims: usize,
    output_dims: usize,
    tie: TieRule,
    block_rows: usize,
}

impl LshProjector {
    pub fn new(
        seed: u64,
        role: ProjectorRole,
        input_dims: usize,
        output_dims: usize,
    ) -> Result<Self, LshError> {
        if input_dims == 0 || output_dims == 0 {
            return Err(LshError::EmptyDims);
        }
        Ok(Self {
            seed,
            role,
            input_dims,
            output_dims,
            tie: TieRule::Positive,
            block_rows: DEFAULT_BLOCK_ROWS,
        })
    }

    pub fn with_block_rows(mut self, block_rows: usize) -> Self {
        self.block_rows = block_rows.max(1);
        self
    }

    pub fn with_tie_rule(mut self, tie: TieRule) -> Self {
        self.tie = tie;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn role(&self) -> ProjectorRole {
        self.role
    }

    pub fn input_dims(&self) -> usize {
        self.input_dims
    }

    pub fn output_dims(&self) -> usize {
        self.output_dims
    }

    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    /// Writes hyperplane `k` into `out` (length `input_dims`).
    pub fn fill_row(&self, k: usize, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.input_dims);
        let mut rng = counter_rng(self.seed, self.role.domain(), k as u64);
        fill_gaussian(&mut rng, out);
    }

    pub fn row(&self, k: usize) -> Vec<f32> {
        let mut out = vec![0f32; self.input_dims];
        self.fill_row(k, &mut out);
        out
    }

    pub fn project(&self, x: &[f32]) -> Result<Hypervector, LshError> {
        let m = Matrix::new(1, x.len(), x.to_vec()).expect("single row");
        Ok(self.project_block(&m)?.pop().expect("one output"))
    }

    /// Projects every row of `xs`. Hyperplanes are generated `block_rows` at
    /// a time; the full `β × d` matrix is never held in memory.
    pub fn project_block(&self, xs: &Matrix) -> Result<Vec<Hypervector>, LshError> {
        validate_inputs(xs, self.input_dims)?;
        let d = self.input_dims;
        let n = xs.rows();
        let block = self.block_rows;
        let n_blocks = self.output_dims.div_ceil(block);
        let parts: Vec<Vec<i8>> = (0..n_blocks)
            .into_par_iter()
            .map(|b| {
                let r0 = b * block;
                let r1 = (r0 + block).min(self.output_dims);
                let width = r1 - r0;
                let mut planes = vec![0f32; width * d];
                for (offset, plane) in planes.chunks_exact_mut(d).enumerate() {
                    self.fill_row(r0 + offset, plane);
                }
                sign_block(&planes, d, xs, self.tie)
            })
            .collect();
        Ok(scatter_blocks(parts, n, self.output_dims, block))
    }

    /// Holds every hyperplane in memory. The result projects bit-identically
    /// to `self` and is worthwhile when `β · d` is small enough to keep.
    pub fn materialize(&self) -> DenseProjector {
        let d = self.input_dims;
        let mut planes = vec![0f32; self.output_dims * d];
        planes
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(k, plane)| self.fill_row(k, plane));
        DenseProjector {
            input_dims: d,
            output_dims: self.output_dims,
            tie: self.tie,
            block_rows: self.block_rows,
            planes,
        }
    }

    /// Bytes a materialized copy would occupy.
    pub fn materialized_bytes(&self) -> usize {
        self.output_dims * self.input_dims * std::mem::size_of::<f32>()
    }
}

/// A projector with all hyperplanes resident.
#[derive(Debug, Clone)]
pub struct DenseProjector {
    input_dims: usize,
    output_dims: usize,
    tie: TieRule,
    block_rows: usize,
    planes: Vec<f32>,
}

impl DenseProjector {
    pub fn input_dims(&self) -> usize {
        self.input_dims
    }

    pub fn output_dims(&self) -> usize {
        self.output_dims
    }

    pub fn project_block(&self, xs: &Matrix) -> Result<Vec<Hypervector>, LshError> {
        validate_inputs(xs, self.input_dims)?;
        let d = self.input_dims;
        let block = self.block_rows;
        let parts: Vec<Vec<i8>> = self
            .planes
            .par_chunks(block * d)
            .map(|planes| sign_block(planes, d, xs, self.tie))
            .collect();
        Ok(scatter_blocks(parts, xs.rows(), self.output_dims, block))
    }
}

/// Either projector flavour behind one interface.
#[derive(Debug, Clone)]
pub enum Projector {
    OnDemand(LshProjector),
    Dense(DenseProjector),
}

impl Projector {
    /// Materializes `lsh` when it fits in `budget_bytes`.
    pub fn with_budget(lsh: LshProjector, budget_bytes: usize) -> Self {
        if lsh.materialized_bytes() <= budget_bytes {
            Projector::Dense(lsh.materialize())
        } else {
            Projector::OnDemand(lsh)
        }
    }

    pub fn input_dims(&self) -> usize {
        match self {
            Projector::OnDemand(p) => p.input_dims(),
            Projector::Dense(p) => p.input_dims(),
        }
    }

    pub fn output_dims(&self) -> usize {
        match self {
            Projector::OnDemand(p) => p.output_dims(),
            Projector::Dense(p) => p.output_dims(),
        }
    }

    pub fn project_block(&self, xs: &Matrix) -> Result<Vec<Hypervector>, LshError> {
        match self {
            Projector::OnDemand(p) => p.project_block(xs),
            Projector::Dense(p) => p.project_block(xs),
        }
    }

    pub fn project(&self, x: &[f32]) -> Result<Hypervector, LshError> {
        let m = Matrix::new(1, x.len(), x.to_vec()).expect("single row");
        Ok(self.project_block(&m)?.pop().expect("one output"))
    }
}

fn validate_inputs(xs: &Matrix, input_dims: usize) -> Result<(), LshError> {
    if xs.cols() != input_dims {
        return Err(LshError::InputLength {
            expected: input_dims,
            found: xs.cols(),
        });
    }
    for (row, x) in xs.iter_rows().enumerate() {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LshError::NonFinite { row });
        }
        if x.iter().all(|&v| v == 0.0) {
            return Err(LshError::ZeroInput { row });
        }
    }
    Ok(())
}

/// Signs of every input against a block of hyperplanes, laid out input-major.
fn sign_block(planes: &[f32], d: usize, xs: &Matrix, tie: TieRule) -> Vec<i8> {
    let width = planes.len() / d;
    let mut signs = vec![0i8; xs.rows() * width];
    for (i, x) in xs.iter_rows().enumerate() {
        let out = &mut signs[i * width..(i + 1) * width];
        for (slot, plane) in out.iter_mut().zip(planes.chunks_exact(d)) {
            *slot = tie.sign_f32(dot(plane, x));
        }
    }
    signs
}

fn scatter_blocks(parts: Vec<Vec<i8>>, n: usize, beta: usize, block: usize) -> Vec<Hypervector> {
    let mut outputs: Vec<Vec<i8>> = (0..n).map(|_| vec![0i8; beta]).collect();
    for (b, part) in parts.iter().enumerate() {
        let r0 = b * block;
        let width = part.len() / n.max(1);
        for (i, out) in outputs.iter_mut().enumerate() {
            out[r0..r0 + width].copy_from_slice(&part[i * width..(i + 1) * width]);
        }
    }
    outputs
        .into_iter()
        .map(Hypervector::from_components_unchecked)
        .collect()
}

/// Positional code `j`: a uniform random hypervector determined by `(seed, j)`.
pub fn positional_code(seed: u64, j: usize, dims: usize) -> Hypervector {
    let mut rng = counter_rng(seed, DOMAIN_POSITIONAL, j as u64);
    Hypervector::random(dims, &mut rng)
}

pub fn positional_codes(seed: u64, n_p: usize, dims: usize) -> Vec<Hypervector> {
    (0..n_p)
        .into_par_iter()
        .map(|j| positional_code(seed, j, dims))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn scale_invariance_and_antisymmetry() {
        let p = LshProjector::new(11, ProjectorRole::Image, 24, 2048).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_vec(&mut rng, 24);
        let scaled: Vec<f32> = x.iter().map(|v| v * 2.0).collect();
        let neg: Vec<f32> = x.iter().map(|v| -v).collect();
        let hx = p.project(&x).unwrap();
        assert_eq!(hx, p.project(&scaled).unwrap());
        assert_eq!(hx, p.project(&neg).unwrap().negated());
    }

    #[test]
    fn errors_on_bad_input() {
        let p = LshProjector::new(1, ProjectorRole::Caption, 4, 64).unwrap();
        assert_eq!(
            p.project(&[1.0, 2.0, 3.0]),
            Err(LshError::InputLength {
                expected: 4,
                found: 3
            })
        );
        assert_eq!(p.project(&[0.0; 4]), Err(LshError::ZeroInput { row: 0 }));
        assert_eq!(
            p.project(&[1.0, f32::NAN, 0.0, 0.0]),
            Err(LshError::NonFinite { row: 0 })
        );
        assert_eq!(
            LshProjector::new(1, ProjectorRole::Image, 0, 8),
            Err(LshError::EmptyDims)
        );
    }

    #[test]
    fn block_size_does_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = Matrix::from_rows(&(0..5).map(|_| random_vec(&mut rng, 17)).collect::<Vec<_>>()).unwrap();
        let small = LshProjector::new(3, ProjectorRole::Image, 17, 10_000)
            .unwrap()
            .with_block_rows(64);
        let large = small.clone().with_block_rows(4096);
        let a = small.project_block(&xs).unwrap();
        assert_eq!(a, large.project_block(&xs).unwrap());
        assert_eq!(a, small.materialize().project_block(&xs).unwrap());
        assert_eq!(a[2], small.project(xs.row(2)).unwrap());
    }

    #[test]
    fn roles_and_seeds_give_different_projectors() {
        let x = [0.3f32, -1.0, 2.0, 0.5];
        let a = LshProjector::new(5, ProjectorRole::Image, 4, 4096).unwrap();
        let b = LshProjector::new(5, ProjectorRole::Caption, 4, 4096).unwrap();
        let c = LshProjector::new(6, ProjectorRole::Image, 4, 4096).unwrap();
        let ha = a.project(&x).unwrap();
        for other in [b, c] {
            let d = ha.normalized_hamming(&other.project(&x).unwrap()).unwrap();
            assert!(d > 0.3, "{d}");
        }
        assert_eq!(a.row(7), a.row(7));
    }

    #[test]
    fn orthogonal_basis_projects_to_near_orthogonal_codes() {
        let d = 16;
        let p = LshProjector::new(9, ProjectorRole::Image, d, 50_000).unwrap();
        let basis: Vec<Vec<f32>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let hvs = p.project_block(&Matrix::from_rows(&basis).unwrap()).unwrap();
        for i in 0..d {
            for j in (i + 1)..d {
                let h = hvs[i].normalized_hamming(&hvs[j]).unwrap();
                assert!((h - 0.5).abs() <= 0.02, "{i},{j}: {h}");
            }
        }
    }

    #[test]
    fn positional_codes_are_deterministic_and_orthogonal() {
        let codes = positional_codes(42, 4, 50_000);
        assert_eq!(codes[1], positional_code(42, 1, 50_000));
        for i in 0..4 {
            for j in (i + 1)..4 {
                let h = codes[i].normalized_hamming(&codes[j]).unwrap();
                assert!((0.49..=0.51).contains(&h));
            }
        }
        let reseeded = positional_code(43, 0, 50_000);
        let h = codes[0].normalized_hamming(&reseeded).unwrap();
        assert!((h - 0.5).abs() < 0.02, "{h}");
    }

    #[test]
    fn with_budget_selects_flavour() {
        let p = LshProjector::new(1, ProjectorRole::Caption, 8, 128).unwrap();
        assert!(matches!(Projector::with_budget(p.clone(), 1 << 20), Projector::Dense(_)));
        assert!(matches!(Projector::with_budget(p, 16), Projector::OnDemand(_)));
    }
}
