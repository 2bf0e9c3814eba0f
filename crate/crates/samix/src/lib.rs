//! Learnable mixup for supervised and self-supervised training, desk scale.
//!
//! The crate bundles everything needed to train and probe a mask-generating
//! mixup model end to end on one machine with no ML framework:
//!
//! - [`tensor`]: f64 tensors with reverse-mode autodiff on an explicit tape.
//! - [`nn`]: layers (conv, batchnorm, linear), initializers, SGD.
//! - [`data`]: CIFAR-style binary loading, a synthetic shapes dataset,
//!   two-view augmentation, and Beta-distributed mixing ratios.
//! - [`mixer`]: the learnable mask generator plus the classic constant and
//!   rectangle mask policies.
//! - [`losses`]: cross-entropy and infoNCE families, their two-class local
//!   variants, the eta-balanced combination, and mask priors.
//! - [`encoder`]: a small 4-stage CNN backbone with projector, classifier,
//!   and cluster heads.
//! - [`pipeline`]: momentum alternating optimization for the supervised and
//!   contrastive scenarios, online clustering, checkpointing.
//! - [`image_io`]: PGM/PPM output for visual inspection.
//!
//! Shape and contract violations panic; data-format problems (files,
//! checkpoints) return structured errors.

pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod image_io;
pub mod losses;
pub mod mixer;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use tensor::{ema_update, gradcheck, Tape, Tensor};
