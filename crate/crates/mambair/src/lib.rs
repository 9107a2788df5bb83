// Numeric kernels here are written as explicit indexed loops on flat
// buffers; the lint trades away the symmetry that makes them auditable.
#![allow(clippy::needless_range_loop)]

//! Selective state-space sequence kernels and the MambaIR image
//! restoration network at desk scale.
//!
//! The crate is organized around the pieces of that architecture:
//!
//! - [`tensor`]: dense f64 tensors and a reverse-mode autodiff tape
//! - [`ssm`]: continuous LTI systems, ZOH discretization, recurrent /
//!   convolutional / parallel-scan evaluation, and the input-dependent
//!   (selective) variant
//! - [`scan2d`]: four-direction flattening of 2D feature maps and the
//!   2D selective scan module
//! - [`blocks`]: VSSM, channel attention, residual state-space blocks
//!   and groups, and the full three-stage restoration network
//! - [`pipeline`]: images, augmentation, degradation, losses, Adam,
//!   metrics, training loop, checkpoints
//! - [`diagnostics`]: effective-receptive-field maps, channel activation
//!   statistics, and complexity benchmarks against a full-attention
//!   baseline

pub mod blocks;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod pipeline;
pub mod rng;
pub mod scan2d;
pub mod selftest;
pub mod ssm;
pub mod tensor;

pub use error::{MirError, Result};
pub use tensor::{Tape, Tensor};
