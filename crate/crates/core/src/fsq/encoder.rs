use alloc::vec::Vec;

use super::{codes_from_quantized, ste_quantize, CodebookConfig, ConditionCode};
use crate::rng::Rng;
use crate::tensor::nn::{Conv2d, Init, Linear, ParamSet};
use crate::tensor::{Conv2dSpec, Tape, Tensor, Var};
use crate::{Error, Result};

/// Encoder architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderArch {
    /// Two hidden SiLU layers over flat vectors.
    Mlp { input_dim: usize, hidden: usize },
    /// Two stride-2 conv blocks (3x3, SiLU) then a linear head, over
    /// `[C, H, W]` images stored as flat rows.
    Conv {
        channels: usize,
        height: usize,
        width: usize,
        features: usize,
    },
}

impl EncoderArch {
    pub fn input_dim(&self) -> usize {
        match *self {
            EncoderArch::Mlp { input_dim, .. } => input_dim,
            EncoderArch::Conv {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layers {
    Mlp([Linear; 3]),
    Conv { convs: [Conv2d; 2], head: Linear },
}

/// Maps data rows to `d` real outputs that are then quantized.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNet {
    arch: EncoderArch,
    codebook: CodebookConfig,
    layers: Layers,
    params: ParamSet,
}

const STRIDE2: Conv2dSpec = Conv2dSpec { stride: 2, padding: 1 };

fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

impl EncoderNet {
    pub fn new(arch: EncoderArch, codebook: CodebookConfig, rng: &mut Rng) -> Result<Self> {
        let d = codebook.channels();
        let mut params = ParamSet::new();
        let layers = match arch {
            EncoderArch::Mlp { input_dim, hidden } => {
                if input_dim == 0 || hidden == 0 {
                    return Err(Error::invalid("encoder dimensions must be positive"));
                }
                Layers::Mlp([
                    Linear::init(&mut params, "enc.l0", input_dim, hidden, Init::DEFAULT, rng),
                    Linear::init(&mut params, "enc.l1", hidden, hidden, Init::DEFAULT, rng),
                    Linear::init(&mut params, "enc.out", hidden, d, Init::DEFAULT, rng),
                ])
            }
            EncoderArch::Conv {
                channels,
                height,
                width,
                features,
            } => {
                if channels == 0 || height == 0 || width == 0 || features == 0 {
                    return Err(Error::invalid("encoder dimensions must be positive"));
                }
                let c0 = Conv2d::init(&mut params, "enc.conv0", (channels, features, 3), STRIDE2, rng);
                let c1 = Conv2d::init(&mut params, "enc.conv1", (features, features, 3), STRIDE2, rng);
                let flat = features * halve(halve(height)) * halve(halve(width));
                let head = Linear::init(&mut params, "enc.out", flat, d, Init::DEFAULT, rng);
                Layers::Conv { convs: [c0, c1], head }
            }
        };
        Ok(Self {
            arch,
            codebook,
            layers,
            params,
        })
    }

    pub fn arch(&self) -> EncoderArch {
        self.arch
    }

    pub fn codebook(&self) -> &CodebookConfig {
        &self.codebook
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Same architecture with other parameter values (e.g. an EMA shadow).
    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        if !params.same_layout(&self.params) {
            return Err(Error::LayoutMismatch("encoder parameters".into()));
        }
        Ok(Self { params, ..self.clone() })
    }

    /// Zeroes the output layer, so every input maps to the all-`floor(L/2)` code.
    pub fn zero_head(&mut self) {
        let head = match &self.layers {
            Layers::Mlp(l) => l[2],
            Layers::Conv { head, .. } => *head,
        };
        for idx in [head.weight, head.bias] {
            self.params.tensors_mut()[idx].data_mut().fill(0.0);
        }
    }

    /// Raw outputs `[B, d]` for row-batched input `[B, input_dim]`, using
    /// `vars` attached from this encoder's parameter layout.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.arch.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: alloc::vec![self.arch.input_dim()],
                rhs: shape,
            });
        }
        match (&self.layers, self.arch) {
            (Layers::Mlp(l), _) => {
                let h = l[0].forward(tape, vars, x)?;
                let h = tape.silu(h)?;
                let h = l[1].forward(tape, vars, h)?;
                let h = tape.silu(h)?;
                l[2].forward(tape, vars, h)
            }
            (
                Layers::Conv { convs, head },
                EncoderArch::Conv {
                    channels,
                    height,
                    width,
                    ..
                },
            ) => {
                let rows = shape[0];
                let img = tape.reshape(x, &[rows, channels, height, width])?;
                let h = convs[0].forward(tape, vars, img)?;
                let h = tape.silu(h)?;
                let h = convs[1].forward(tape, vars, h)?;
                let h = tape.silu(h)?;
                let flat = tape.value(h).numel() / rows;
                let h = tape.reshape(h, &[rows, flat])?;
                head.forward(tape, vars, h)
            }
            _ => unreachable!("layers always match the architecture"),
        }
    }

    /// Encoder output followed by straight-through quantization. Returns the
    /// quantized tensor (gradient flows to the encoder) and the codes.
    pub fn encode_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, Vec<ConditionCode>)> {
        let y = self.forward(tape, vars, x)?;
        let q = ste_quantize(tape, y, &self.codebook)?;
        let codes = codes_from_quantized(tape.value(q).data(), &self.codebook)?;
        Ok((q, codes))
    }

    /// Raw outputs for each row of `x`, without gradients.
    pub fn outputs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape, false)?;
        let input = self.input(&mut tape, x)?;
        let y = self.forward(&mut tape, &vars, input)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Codes for each row of `x`.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<ConditionCode>> {
        let y = self.outputs(x)?;
        y.chunks(self.codebook.channels())
            .map(|row| ConditionCode::from_digits(super::quantize(row, &self.codebook)?, &self.codebook))
            .collect()
    }

    fn input(&self, tape: &mut Tape, x: &[f64]) -> Result<Var> {
        let dim = self.arch.input_dim();
        if x.is_empty() || !x.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: alloc::vec![dim],
                rhs: alloc::vec![x.len()],
            });
        }
        tape.constant(Tensor::matrix(x.len() / dim, dim, x.to_vec())?)
    }
}
