//! Small residual networks built on a tape-based reverse-mode differentiator,
//! together with probes that measure how each residual block moves the hidden
//! representation relative to the loss gradient.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`] – dense tensors, the recording tape and a finite-difference oracle.
//! * [`nn`] – batch normalization (with per-step banks), residual blocks, model assembly
//!   and closed-form parameter counting.
//! * [`train`] – SGD with classical momentum, stepwise schedules and augmentation.
//! * [`data`] – CIFAR binary / IDX readers and synthetic generators.
//! * [`probes`] – cosine loss, ℓ² ratio, block dropping, borderline tracking, gradient
//!   norm ratio, first-layer step identity and Taylor-residual convergence.
//! * [`share_unroll`] – weight-shared stages, per-step batch norm and post-hoc unrolling.
//! * [`cli`] – config-driven experiment runners used by the `resiter` binary.

pub mod autodiff;
pub mod cli;
pub mod data;
mod error;
pub mod nn;
pub mod probes;
pub mod rng;
pub mod share_unroll;
pub mod train;

pub use error::{Error, Result};

/// Floating-point type used for every tensor.
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
/// Floating-point type used for every tensor.
#[cfg(feature = "single-precision")]
pub type Real = f32;
