//! Sequence-to-sequence translation models built on a two-dimensional LSTM
//! grid, with tape-based reverse-mode autodiff, deterministic training and
//! beam search decoding.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: row-major tensors with order-pinned numeric kernels
//! - [`tape`]: reverse-mode autodiff over an append-only operation tape
//! - [`ctx`]: one math API with recording and pure evaluation backends
//! - [`gradcheck`]: finite-difference gradient verification
//! - [`cells`]: standard and two-dimensional LSTM cells
//! - [`grid`]: grid execution (sequential, wavefront, incremental by row)
//! - [`model`]: encoder plus the five translation model variants
//! - [`training`]: Adam, gradient clipping, the training loop, checkpointing
//! - [`decoding`]: length-normalized beam search
//! - [`data`]: vocabularies, corpora, synthetic tasks, BLEU and perplexity
//! - [`io`]: run configuration and the checkpoint wire format

pub mod cells;
pub mod ctx;
pub mod data;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod model;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
