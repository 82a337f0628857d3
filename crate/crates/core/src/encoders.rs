//! Image-level and caption-position hypervectors.
//!
//! An image becomes the bundle of its patch codes, each bound to a
//! positional code: `binarize(Σ_j s_j ⊗ LSH_I(z_j))`. A caption becomes one
//! hypervector per token position, `LSH_C(h_i)`, taken from the causal
//! hidden states of the whole sequence in a single pass.

use thiserror::Error;

use crate::hdcore::{AccumVector, HdError, Hypervector, TieRule};
use crate::lsh::{positional_codes, LshError, LshProjector, ProjectorRole, Projector};
use crate::matrix::Matrix;
use crate::protomem::{EncoderDims, Seeds};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("image has {found} patches, configuration expects {expected}")]
    PatchCount { expected: usize, found: usize },
    #[error("features have width {found}, projector expects {expected}")]
    FeatureWidth { expected: usize, found: usize },
    #[error(transparent)]
    Lsh(#[from] LshError),
    #[error(transparent)]
    Hd(#[from] HdError),
}

/// Patch features of one image, `n_p × d_I`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures(pub Matrix);

impl PatchFeatures {
    pub fn n_p(&self) -> usize {
        self.0.rows()
    }

    pub fn d_i(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Default budget under which projectors keep their hyperplanes resident.
pub const DEFAULT_PROJECTION_CACHE_BYTES: usize = 64 << 20;

/// Image encoder: the image projector plus the positional codes `s_j`.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    projector: Projector,
    codes: Vec<Hypervector>,
    tie: TieRule,
}

impl ImageEncoder {
    pub fn new(projector: Projector, codes: Vec<Hypervector>) -> Result<Self, EncodeError> {
        if let Some(c) = codes.iter().find(|c| c.dims() != projector.output_dims()) {
            return Err(HdError::DimensionMismatch {
                expected: projector.output_dims(),
                found: c.dims(),
            }
            .into());
        }
        Ok(Self {
            projector,
            codes,
            tie: TieRule::Positive,
        })
    }

    pub fn n_p(&self) -> usize {
        self.codes.len()
    }

    pub fn beta(&self) -> usize {
        self.projector.output_dims()
    }

    pub fn encode(&self, features: &PatchFeatures) -> Result<Hypervector, EncodeError> {
        Ok(self.encode_many(std::slice::from_ref(features))?.remove(0))
    }

    /// Encodes several images with a single pass over the hyperplanes.
    pub fn encode_many(&self, images: &[PatchFeatures]) -> Result<Vec<Hypervector>, EncodeError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for img in images {
            self.check(img)?;
        }
        let d = self.projector.input_dims();
        let mut stacked = Vec::with_capacity(images.len() * self.n_p() * d);
        for img in images {
            stacked.extend_from_slice(img.0.as_slice());
        }
        let stacked = Matrix::new(images.len() * self.n_p(), d, stacked).expect("stacked shape");
        let patch_codes = self.projector.project_block(&stacked)?;
        Ok(patch_codes
            .chunks(self.n_p())
            .map(|patches| {
                let mut acc = AccumVector::zeros(self.beta());
                for (code, s) in patches.iter().zip(&self.codes) {
                    acc.accumulate(&code.bind(s).expect("dims checked"))
                        .expect("patch count fits in i32");
                }
                acc.binarize(self.tie)
            })
            .collect())
    }

    fn check(&self, img: &PatchFeatures) -> Result<(), EncodeError> {
        if img.n_p() != self.n_p() {
            return Err(EncodeError::PatchCount {
                expected: self.n_p(),
                found: img.n_p(),
            });
        }
        if img.d_i() != self.projector.input_dims() {
            return Err(EncodeError::FeatureWidth {
                expected: self.projector.input_dims(),
                found: img.d_i(),
            });
        }
        Ok(())
    }
}

/// Caption encoder: projects hidden-state rows with the caption projector.
#[derive(Debug, Clone)]
pub struct CaptionEncoder {
    projector: Projector,
}

impl CaptionEncoder {
    pub fn new(projector: Projector) -> Self {
        Self { projector }
    }

    pub fn d_c(&self) -> usize {
        self.projector.input_dims()
    }

    pub fn beta(&self) -> usize {
        self.projector.output_dims()
    }

    /// One hypervector per row of `hidden`.
    pub fn encode_positions(&self, hidden: &Matrix) -> Result<Vec<Hypervector>, EncodeError> {
        if hidden.cols() != self.d_c() {
            return Err(EncodeError::FeatureWidth {
                expected: self.d_c(),
                found: hidden.cols(),
            });
        }
        if hidden.rows() == 0 {
            return Ok(Vec::new());
        }
        Ok(self.projector.project_block(hidden)?)
    }

    pub fn encode_row(&self, row: &[f32]) -> Result<Hypervector, EncodeError> {
        if row.len() != self.d_c() {
            return Err(EncodeError::FeatureWidth {
                expected: self.d_c(),
                found: row.len(),
            });
        }
        Ok(self.projector.project(row)?)
    }
}

/// The context cue for the next token: image ⊗ caption position.
pub fn combine(img: &Hypervector, cap: &Hypervector) -> Result<Hypervector, HdError> {
    img.bind(cap)
}

/// Both encoders, built from the seeds stored with a prototype memory.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub image: ImageEncoder,
    pub caption: CaptionEncoder,
}

impl Encoders {
    pub fn new(seeds: &Seeds, dims: EncoderDims, beta: usize) -> Result<Self, EncodeError> {
        Self::with_cache_budget(seeds, dims, beta, DEFAULT_PROJECTION_CACHE_BYTES)
    }

    pub fn with_cache_budget(
        seeds: &Seeds,
        dims: EncoderDims,
        beta: usize,
        cache_bytes: usize,
    ) -> Result<Self, EncodeError> {
        let image_lsh = LshProjector::new(seeds.lsh_image, ProjectorRole::Image, dims.d_i, beta)?;
        let caption_lsh =
            LshProjector::new(seeds.lsh_caption, ProjectorRole::Caption, dims.d_c, beta)?;
        let codes = positional_codes(seeds.positional, dims.n_p, beta);
        Ok(Self {
            image: ImageEncoder::new(Projector::with_budget(image_lsh, cache_bytes), codes)?,
            caption: CaptionEncoder::new(Projector::with_budget(caption_lsh, cache_bytes)),
        })
    }
}
