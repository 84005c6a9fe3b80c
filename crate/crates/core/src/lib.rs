//! Joint low-bit quantization-aware training and N:M structured sparsity
//! for small sequence models, with bit-exact packed storage and kernels.
//!
//! Module map:
//! - [`tensor`]: dense f32 tensors, deterministic PRNG.
//! - [`checkpoint`]: binary container, bit-exact on disk.
//! - [`quant`]: schemes, quantize/dequantize, reference quantized matmul.
//! - [`sparse`]: N:M masks, pruning, mask schedules.
//! - [`packed`]: bit-packed integer storage and fused sparse-quantized matmul.
//! - [`compress`]: checkpoint-level prune + quantize + pack pipeline.
//! - [`sizer`]: closed-form size estimates and byte-accurate measurement.
//! - [`train`]: reverse-mode autodiff, CTC loss, Adam, the joint training loop.
//! - [`verify`]: randomized self-check suites (packed vs reference, CTC).
//!
//! The `parallel` feature (default on) runs data-parallel loops on rayon;
//! disabling it yields a sequential build with bit-identical outputs.

pub mod checkpoint;
pub mod compress;
pub mod error;
mod exec;
pub mod packed;
pub mod quant;
pub mod sizer;
pub mod sparse;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
