//! Coarse-to-fine music generation inside one deep residual-quantized
//! acoustic token hierarchy.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: f32 tensors, reverse-mode autodiff, AdamW.
//! - [`signal`]: synthetic lyric corpus, STFT, multi-scale spectral loss, SDR.
//! - [`rvq`]: residual vector quantization with EMA codebooks.
//! - [`codec`]: convolutional encoder/decoder around the RVQ stack.
//! - [`checkpoint`]: the `ATCK` tensor container shared by all models.
//! - [`lm`]: small transformer with causal/full masks and blocked vocabularies.
//! - [`sequence`]: backbone, Task 0 and Task 1 sequence builders.
//! - [`trainer`]: backbone / super-resolution training and transfer.
//! - [`pipeline`]: backbone generation, layer-wise super-resolution, rendering.
//! - [`eval`]: alignment oracle, ablations, Bradley–Terry/Elo ranking.
//! - [`run`]: the whole-run configuration used by the command line.
//! - [`config`]: flat `key=value` run configuration with a stable digest.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod lm;
pub mod numerics;
pub mod pipeline;
pub mod run;
pub mod rvq;
pub mod sequence;
pub mod signal;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
pub use numerics::{Graph, Params, Tensor, Var};
