use alloc::format;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
}

/// Whether a step touched the parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was non-finite; nothing was changed.
    Skipped {
        param: usize,
    },
}

/// SGD or Adam over a fixed parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| alloc::vec![0.0; t.numel()];
        let (first, second) = match config.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (params.iter().map(zeros).collect(), params.iter().map(zeros).collect()),
        };
        Self {
            config,
            steps: 0,
            first,
            second,
        }
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    /// Changes the learning rate; moments and the step count are kept.
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Adam moment buffers, `(first, second)`; empty under SGD.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Restores a saved state; the moment layout must match.
    pub fn restore(&mut self, steps: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Result<()> {
        let same =
            |a: &[Vec<f64>], b: &[Vec<f64>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&first, &self.first) || !same(&second, &self.second) {
            return Err(Error::LayoutMismatch(format!(
                "optimizer state with {} moment tensors, expected {}",
                first.len(),
                self.first.len()
            )));
        }
        self.steps = steps;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One update `theta <- theta - lr * direction`. A non-finite gradient
    /// anywhere skips the whole step.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<StepOutcome> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
            return Err(Error::LayoutMismatch(format!(
                "{} parameters vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if let Some(param) = grads.iter().position(|g| !g.is_finite()) {
            return Ok(StepOutcome::Skipped { param });
        }
        let lr = self.config.lr;
        self.steps += 1;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as f64;
                let c1 = 1.0 - libm::pow(beta1, t);
                let c2 = 1.0 - libm::pow(beta2, t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *w -= lr * mhat / (libm::sqrt(vhat) + eps);
                    }
                }
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// `shadow <- decay * shadow + (1 - decay) * live`, elementwise.
///
/// `decay` must lie in `(0, 1]`; `1` leaves the shadow untouched.
pub fn ema_update(shadow: &mut [Tensor], live: &[Tensor], decay: f64) -> Result<()> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::invalid(format!("EMA decay {decay} outside (0, 1]")));
    }
    if shadow.len() != live.len() || shadow.iter().zip(live).any(|(s, l)| s.shape() != l.shape()) {
        return Err(Error::LayoutMismatch("EMA shadow and live parameters differ".into()));
    }
    for (s, l) in shadow.iter_mut().zip(live) {
        for (sv, &lv) in s.data_mut().iter_mut().zip(l.data()) {
            *sv = decay * *sv + (1.0 - decay) * lv;
        }
    }
    Ok(())
}
