//! Gaze estimation with a disentangled face representation and cascaded
//! multi-scale attention, built on a small f64 reverse-mode autodiff tape.
//!
//! - [`tensor`]: dense tensors and the [`Tape`].
//! - [`nn`]: parameter store, initialisation, conv/linear/MLP layers.
//! - [`attention`]: CBAM, Gaussian-modulated non-local block, MS-GLAM cascade.
//! - [`model`]: encoders, disentangler, decoders, gaze head.
//! - [`losses`]: reconstruction and gaze losses, angular error.
//! - [`data`]: procedural face scenes and batching.
//! - [`train`]: AdamW, schedule, training loop, checkpoints, export, gradient suite.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
