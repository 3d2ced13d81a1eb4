//! Large kernel distillation network (LKDN) for single-image super-resolution.
//!
//! The crate is `no_std` (with `alloc`) and contains every numeric piece of the
//! network: a rank-4 [`Tensor`] with direct convolution kernels, a taped
//! reverse-mode [`autodiff`] engine, the composite [`blocks`], the assembled
//! [`model`] with parameter and Multi-Adds accounting, structural
//! re-parameterization in [`reparam`], the [`optim`] optimizers, and the
//! image-quality protocol in [`data`]. File formats and the command line live
//! in the companion `lkdn` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod blocks;
pub mod data;
mod error;
pub mod model;
pub mod optim;
pub mod reparam;
mod scalar;
pub mod tensor;

pub use autodiff::{Eager, GradMap, Graph, NodeId, Tape};
pub use error::{Error, Result};
pub use model::{LkdnConfig, Model, Param, RefinementVariant};
pub use scalar::{DType, Scalar};
pub use tensor::{ConvSpec, Shape, Tensor};
