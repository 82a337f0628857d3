//! Hyperdimensional prototype learning and caption decoding over frozen
//! encoder features.
//!
//! Images and caption contexts are mapped to bipolar hypervectors by random
//! hyperplane hashing, bound together, and accumulated into a
//! `(position, token)` table of prototypes kept on disk. Decoding scores
//! every prototype of the next positions by Hamming distance to the current
//! context and blends the result with language-model logits.

pub mod bench;
pub mod decoder;
pub mod encoders;
pub mod hdcore;
pub mod learner;
pub mod lsh;
pub mod matrix;
pub mod protomem;
pub mod providers;
pub mod rng;
pub mod sampler;
pub mod selftest;
