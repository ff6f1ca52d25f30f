//! Zero-shot editing by conditional renoising with a hard consistency
//! projection: inpainting, super-resolution and colorization.
//!
//! Images are rows laid out channel-major (`[C, H, W]`). Every operator's
//! pseudo-inverse satisfies `A(A+(y)) = y` bitwise: block and channel
//! means are pairwise sums over power-of-two groups, so averaging copies
//! of one value returns it exactly.

use alloc::vec;
use alloc::vec::Vec;

use crate::denoiser::ImageShape;
use crate::model::Model;
use crate::rng;
use crate::samplers::{sde_renoise_step, TimeSchedule};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegradationKind {
    /// `A` is the identity; `Omega` marks pixels to synthesize.
    Mask,
    /// Mean over `factor x factor` blocks; `A+` repeats each block value.
    Downsample { factor: usize },
    /// Mean over channels; `A+` broadcasts it to every channel.
    ChannelAverage,
}

/// A linear degradation with its pseudo-inverse and a mask `Omega` on the
/// degraded domain (1 = synthesize, 0 = preserve).
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationOp {
    kind: DegradationKind,
    shape: ImageShape,
    omega: Vec<f64>,
}

impl DegradationOp {
    pub fn new(kind: DegradationKind, shape: ImageShape, omega: Vec<f64>) -> Result<Self> {
        if shape.numel() == 0 {
            return Err(Error::invalid("empty image shape"));
        }
        match kind {
            DegradationKind::Mask => {}
            DegradationKind::Downsample { factor } => {
                if !factor.is_power_of_two()
                    || !shape.height.is_multiple_of(factor)
                    || !shape.width.is_multiple_of(factor)
                {
                    return Err(Error::invalid(alloc::format!(
                        "downsample factor {factor} must be a power of two dividing {}x{}",
                        shape.height,
                        shape.width
                    )));
                }
            }
            DegradationKind::ChannelAverage => {
                if shape.channels < 2 || !shape.channels.is_power_of_two() {
                    return Err(Error::invalid(
                        "channel averaging needs a power-of-two channel count >= 2",
                    ));
                }
            }
        }
        let op = Self { kind, shape, omega };
        if op.omega.len() != op.degraded_len() {
            return Err(Error::ShapeMismatch {
                op: "degradation mask",
                lhs: vec![op.degraded_len()],
                rhs: vec![op.omega.len()],
            });
        }
        if op.omega.iter().any(|&w| w != 0.0 && w != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        Ok(op)
    }

    /// An operator with `Omega` = 0 everywhere (preserve all).
    pub fn preserve_all(kind: DegradationKind, shape: ImageShape) -> Result<Self> {
        let probe = Self {
            kind,
            shape,
            omega: Vec::new(),
        };
        Self::new(kind, shape, vec![0.0; probe.degraded_len()])
    }

    pub fn kind(&self) -> DegradationKind {
        self.kind
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    /// Length of one degraded row.
    pub fn degraded_len(&self) -> usize {
        let s = self.shape;
        match self.kind {
            DegradationKind::Mask => s.numel(),
            DegradationKind::Downsample { factor } => s.channels * (s.height / factor) * (s.width / factor),
            DegradationKind::ChannelAverage => s.height * s.width,
        }
    }

    fn rows(&self, len: usize, per_row: usize, op: &'static str) -> Result<usize> {
        if len == 0 || !len.is_multiple_of(per_row) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![per_row],
                rhs: vec![len],
            });
        }
        Ok(len / per_row)
    }

    /// `A x` for every row of `x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.shape.numel();
        let rows = self.rows(x.len(), n, "apply degradation")?;
        let (c, h, w) = (self.shape.channels, self.shape.height, self.shape.width);
        let mut out = Vec::with_capacity(rows * self.degraded_len());
        for img in x.chunks(n) {
            match self.kind {
                DegradationKind::Mask => out.extend_from_slice(img),
                DegradationKind::Downsample { factor } => {
                    let mut block = Vec::with_capacity(factor * factor);
                    for ch in 0..c {
                        for by in 0..h / factor {
                            for bx in 0..w / factor {
                                block.clear();
                                for dy in 0..factor {
                                    let row = ch * h * w + (by * factor + dy) * w + bx * factor;
                                    block.extend_from_slice(&img[row..row + factor]);
                                }
                                out.push(pairwise_sum(&mut block) / (factor * factor) as f64);
                            }
                        }
                    }
                }
                DegradationKind::ChannelAverage => {
                    let mut group = Vec::with_capacity(c);
                    for p in 0..h * w {
                        group.clear();
                        group.extend((0..c).map(|ch| img[ch * h * w + p]));
                        out.push(pairwise_sum(&mut group) / c as f64);
                    }
                }
            }
        }
        Ok(out)
    }

    /// `A+ y` for every degraded row of `y`.
    pub fn pseudo_invert(&self, y: &[f64]) -> Result<Vec<f64>> {
        let m = self.degraded_len();
        let rows = self.rows(y.len(), m, "pseudo-invert degradation")?;
        let (c, h, w) = (self.shape.channels, self.shape.height, self.shape.width);
        let mut out = Vec::with_capacity(rows * self.shape.numel());
        for low in y.chunks(m) {
            match self.kind {
                DegradationKind::Mask => out.extend_from_slice(low),
                DegradationKind::Downsample { factor } => {
                    let (lh, lw) = (h / factor, w / factor);
                    for ch in 0..c {
                        for yy in 0..h {
                            for xx in 0..w {
                                out.push(low[ch * lh * lw + (yy / factor) * lw + xx / factor]);
                            }
                        }
                    }
                }
                DegradationKind::ChannelAverage => {
                    for _ in 0..c {
                        out.extend_from_slice(low);
                    }
                }
            }
        }
        Ok(out)
    }

    /// `A+[(A z) (1 - Omega) + (A x) Omega]`, row by row, selecting rather
    /// than multiplying so preserved entries are copied bit for bit.
    pub fn project(&self, x: &[f64], az: &[f64]) -> Result<Vec<f64>> {
        let ax = self.apply(x)?;
        if az.len() != ax.len() {
            return Err(Error::ShapeMismatch {
                op: "projection",
                lhs: vec![ax.len()],
                rhs: vec![az.len()],
            });
        }
        let m = self.degraded_len();
        let mixed: Vec<f64> = ax
            .iter()
            .zip(az)
            .enumerate()
            .map(|(i, (&a, &z))| if self.omega[i % m] == 0.0 { z } else { a })
            .collect();
        self.pseudo_invert(&mixed)
    }
}

/// In-place pairwise summation; exact for power-of-two copies of one value.
fn pairwise_sum(v: &mut [f64]) -> f64 {
    let mut n = v.len();
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            v[i] = v[2 * i] + v[2 * i + 1];
        }
        if n % 2 == 1 {
            v[half] = v[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    v.first().copied().unwrap_or(0.0)
}

/// One editing job over a batch of reference rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EditTask {
    pub reference: Vec<f64>,
    pub op: DegradationOp,
    pub schedule: TimeSchedule,
    pub seed: u64,
}

impl EditTask {
    /// Polynomial (`rho = 7`) schedule of `steps` times from the flow's
    /// `t_max` to its sampling floor.
    pub fn new(model: &Model, reference: Vec<f64>, op: DegradationOp, steps: usize, seed: u64) -> Result<Self> {
        let flow = model.flow;
        let task = Self {
            reference,
            op,
            schedule: TimeSchedule::polynomial(steps, flow.sample_floor, flow.t_max, 7.0),
            seed,
        };
        task.validate(model)?;
        Ok(task)
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        self.schedule.validate()?;
        let dim = crate::model::VelocityPredictor::dim(model);
        if self.op.shape().numel() != dim {
            return Err(Error::ShapeMismatch {
                op: "edit task",
                lhs: vec![dim],
                rhs: vec![self.op.shape().numel()],
            });
        }
        if self.reference.is_empty() || !self.reference.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch {
                op: "edit reference",
                lhs: vec![dim],
                rhs: vec![self.reference.len()],
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditResult {
    pub x: Vec<f64>,
    /// Code of every row at every step; empty for unconditional models.
    pub code_trace: Vec<Vec<u64>>,
}

/// Runs the editing loop: project the reference, then per time `t`
/// re-encode the current estimate, renoise to `t`, denoise under the new
/// code and project back onto the preserved region.
pub fn zero_shot_edit(model: &Model, task: &EditTask) -> Result<EditResult> {
    zero_shot_edit_with(model, task, |_, _| {})
}

/// [`zero_shot_edit`], handing the projected state to `on_step` after
/// every step.
pub fn zero_shot_edit_with(
    model: &Model,
    task: &EditTask,
    mut on_step: impl FnMut(usize, &[f64]),
) -> Result<EditResult> {
    task.validate(model)?;
    let op = &task.op;
    let az = op.apply(&task.reference)?;
    let zeros = vec![0.0; task.reference.len()];
    let mut x = op.project(&zeros, &az)?;
    let mut rng = rng::seeded(task.seed);
    let mut trace = Vec::new();
    for (step, t) in task.schedule.times()?.into_iter().enumerate() {
        let codes = if model.is_conditional() {
            let c = model.encode(&x)?;
            trace.push(c.clone());
            Some(c)
        } else {
            None
        };
        let denoised = sde_renoise_step(model, &x, t, codes.as_deref(), &mut rng)?;
        x = op.project(&denoised, &az)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        on_step(step, &x);
    }
    Ok(EditResult { x, code_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, DenoiserNet};
    use crate::flows::FlowSpec;
    use crate::fsq::{CodebookConfig, EncoderArch, EncoderNet};

    fn shape(c: usize) -> ImageShape {
        ImageShape {
            channels: c,
            height: 4,
            width: 4,
        }
    }

    #[test]
    fn block_mean_example() {
        let s = ImageShape {
            channels: 1,
            height: 2,
            width: 2,
        };
        let op = DegradationOp::preserve_all(DegradationKind::Downsample { factor: 2 }, s).unwrap();
        let y = op.apply(&[1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(y, vec![4.0]);
        let up = op.pseudo_invert(&y).unwrap();
        assert_eq!(up, vec![4.0; 4]);
        assert_eq!(op.apply(&up).unwrap(), vec![4.0]);
    }

    #[test]
    fn mask_is_identity() {
        let op = DegradationOp::preserve_all(DegradationKind::Mask, shape(1)).unwrap();
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.37).collect();
        assert_eq!(op.apply(&x).unwrap(), x);
        assert_eq!(op.pseudo_invert(&x).unwrap(), x);
    }

    #[test]
    fn rejects_bad_operators() {
        assert!(DegradationOp::preserve_all(DegradationKind::Downsample { factor: 3 }, shape(1)).is_err());
        assert!(DegradationOp::preserve_all(DegradationKind::ChannelAverage, shape(1)).is_err());
        assert!(DegradationOp::new(DegradationKind::Mask, shape(1), vec![0.5; 16]).is_err());
        assert!(DegradationOp::new(DegradationKind::Mask, shape(1), vec![0.0; 15]).is_err());
        let op = DegradationOp::preserve_all(DegradationKind::Mask, shape(1)).unwrap();
        assert!(op.apply(&[0.0; 15]).is_err());
    }

    fn tiny_model() -> Model {
        let s = shape(2);
        let cb = CodebookConfig::new(2, 3).unwrap();
        let mut r = rng::seeded(0);
        let den = DenoiserNet::new(DenoiserConfig::image_edm(s, Some(cb), 0.5), &mut r).unwrap();
        let enc = EncoderNet::new(
            EncoderArch::Mlp {
                input_dim: s.numel(),
                hidden: 8,
            },
            cb,
            &mut r,
        )
        .unwrap();
        Model::new(FlowSpec::edm(), den, Some(enc)).unwrap()
    }

    #[test]
    fn preserve_all_keeps_degraded_view_exactly() {
        let model = tiny_model();
        let mut r = rng::seeded(4);
        let z = rng::normals(&mut r, 2 * 32);
        for kind in [
            DegradationKind::Mask,
            DegradationKind::Downsample { factor: 2 },
            DegradationKind::ChannelAverage,
        ] {
            let op = DegradationOp::preserve_all(kind, shape(2)).unwrap();
            let task = EditTask::new(&model, z.clone(), op.clone(), 6, 1).unwrap();
            let out = zero_shot_edit(&model, &task).unwrap();
            assert_eq!(op.apply(&out.x).unwrap(), op.apply(&z).unwrap());
            assert_eq!(out.code_trace.len(), 6);
            assert_eq!(out, zero_shot_edit(&model, &task).unwrap());
        }
    }

    #[test]
    fn task_shape_checked() {
        let model = tiny_model();
        let op = DegradationOp::preserve_all(DegradationKind::Mask, shape(2)).unwrap();
        assert!(EditTask::new(&model, vec![0.0; 31], op.clone(), 4, 0).is_err());
        assert!(EditTask::new(&model, vec![0.0; 32], op, 1, 0).is_err());
    }
}
