//! Point-cloud classification of optic nerve head geometry.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Enabling `std` only switches the matrix kernels to runtime CPU
//! feature detection; results are identical either way up to kernel
//! reassociation.
//!
//! Layout:
//! - [`tensor`] and [`autograd`]: dense tensors and a tape-based reverse-mode engine.
//! - [`pointnet`]: the classifier with spatial and feature transform networks.
//! - [`geometry`]: label volumes, boundary extraction, BMO alignment, sampling.
//! - [`synth`]: parametric phantom volumes and populations.
//! - [`optim`] and [`train`]: Adam and the early-stopped training loop.
//! - [`metrics`], [`split`], [`rnfl`], [`cv`]: evaluation.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autograd;
pub mod cv;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod optim;
pub mod pointnet;
pub mod rnfl;
pub mod seed;
pub mod split;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
