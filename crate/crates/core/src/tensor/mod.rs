//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values live in a [`Tape`]; a [`Var`] is a handle to one recorded node.
//! Every primitive checks shapes and rejects non-finite results, and records
//! itself for the backward pass only when one of its inputs requires
//! gradients. Broadcasting is limited to identical shapes and
//! one-element-with-anything; row-wise bias addition is expressed as a
//! matrix product with a ones column (see [`nn::Linear`]).

mod dense;
pub mod gradcheck;
pub mod nn;
mod optim;
mod tape;

pub use dense::Tensor;
pub use optim::{ema_update, Optimizer, OptimizerConfig, OptimizerKind, StepOutcome};
pub use tape::{sigmoid, Conv2dSpec, Tape, Var};
