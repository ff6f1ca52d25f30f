//! Flow matching with learned quantized adaptive conditions.
//!
//! A desk-scale implementation of joint encoder/denoiser training where a
//! light-weight encoder assigns every datum a discrete code, the denoiser is
//! conditioned on that code, and sampling draws codes from weights collected
//! during training. Everything here is allocation-only (`no_std` + `alloc`);
//! file formats, the experiment runner and the CLI live in `qac-lab`.
//!
//! Module map:
//!
//! - [`tensor`]: reverse-mode autodiff over dense `f64` tensors, parameter
//!   sets, SGD/Adam and parameter EMA.
//! - [`flows`]: the four forward-flow families and exact posterior-velocity
//!   oracles over finite datasets.
//! - [`fsq`]: finite scalar quantization, straight-through codes and the
//!   condition encoder.
//! - [`denoiser`]: the conditional denoiser/velocity network.
//! - [`training`]: the conditional CFM loss, the joint training step,
//!   sampling-weight collection and the loss decomposition.
//! - [`samplers`]: time schedules, Euler/Heun/RK45/iPNDM solvers and
//!   conditional sampling.
//! - [`metrics`]: exact 2-Wasserstein, curvature, per-time loss profiles and
//!   the one-step Wasserstein bound check.
//! - [`editing`]: zero-shot editing with consistency projection.
//! - [`toy`]: procedural toy datasets.

#![no_std]
// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod denoiser;
pub mod editing;
mod error;
pub mod flows;
pub mod fsq;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod samplers;
pub mod tensor;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
