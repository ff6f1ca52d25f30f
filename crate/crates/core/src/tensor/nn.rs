//! Named parameter sets and the dense/convolutional layers built on them.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::{Conv2dSpec, Tape, Tensor, Var};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// An ordered list of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Records every parameter as a leaf on `tape`, in order.
    pub fn attach(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Replaces the values of every tensor, checking the layout.
    pub fn load(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.tensors.len() || values.iter().zip(&self.tensors).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::LayoutMismatch(
                "parameter values do not match the layout".to_string(),
            ));
        }
        self.tensors = values;
        Ok(())
    }

    /// Gradients for every attached parameter after a backward pass.
    pub fn grads(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±gain / sqrt(fan_in)`.
    Uniform {
        gain: f64,
    },
    Zeros,
}

impl Init {
    pub const DEFAULT: Init = Init::Uniform { gain: 1.0 };

    fn sample(self, rng: &mut Rng, fan_in: usize, n: usize) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Uniform { gain } => {
                let bound = gain / libm::sqrt(fan_in.max(1) as f64);
                (0..n).map(|_| rng::uniform(rng, -bound, bound)).collect()
            }
        }
    }
}

/// A dense layer `y = x W + b` over row-batched input `[B, fan_in]`.
///
/// The bias is broadcast across rows as `ones[B, 1] x b[1, fan_out]`, which
/// keeps the tape free of implicit broadcasting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn init(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut Rng) -> Self {
        let w = init.sample(rng, fan_in, fan_in * fan_out);
        let weight = params.push(
            alloc::format!("{name}.weight"),
            Tensor::from_parts(vec![fan_in, fan_out], w),
        );
        let bias = params.push(alloc::format!("{name}.bias"), Tensor::zeros(&[1, fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let rows = tape.value(x).shape()[0];
        let xw = tape.matmul(x, vars[self.weight])?;
        let ones = tape.constant(Tensor::full(&[rows, 1], 1.0))?;
        let b = tape.matmul(ones, vars[self.bias])?;
        tape.add(xw, b)
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// A square-kernel convolution with per-channel bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub kernel: usize,
    pub bias: usize,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        spec: Conv2dSpec,
        rng: &mut Rng,
    ) -> Self {
        let w = Init::DEFAULT.sample(rng, cin * k * k, cout * cin * k * k);
        let kernel = params.push(
            alloc::format!("{name}.kernel"),
            Tensor::from_parts(vec![cout, cin, k, k], w),
        );
        let bias = params.push(alloc::format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { kernel, bias, spec }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, vars[self.kernel], Some(vars[self.bias]), self.spec)
    }
}
