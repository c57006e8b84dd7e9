//! Multi-scale masked autoencoding for point clouds.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — dense `f64` tensors with tape-based reverse-mode autodiff
//!   and a finite-difference gradient checker.
//! * [`geometry`] — farthest point sampling, k-NN tables, the scale pyramid,
//!   final-scale masking with back-projection and the l2 Chamfer distance.
//! * [`embedding`] — the two-branch local attention gate, the mini-PointNet
//!   patch tokenizer, token merging and positional embeddings.
//! * [`backbone`] — hierarchical transformer encoder, light decoder with a
//!   shared mask token, reconstruction head and pretraining loss.
//! * [`training`] — AdamW, warmup + cosine schedule, augmentation and the
//!   pretrain / fine-tune / few-shot protocols.
//! * [`io`] — synthetic shapes, xyz files, checkpoints, config and metrics.

pub mod backbone;
pub mod checks;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;

pub use backbone::{BackboneConfig, MaskedAutoencoder};
pub use error::{Error, Result};
pub use geometry::{MaskPlan, PointCloud, ScalePyramid};
pub use io::{Checkpoint, RunConfig};
pub use params::{ParamId, ParamSet};
pub use tensor::{Tape, Tensor, Var};
