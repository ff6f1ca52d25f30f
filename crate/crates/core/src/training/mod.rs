//! Joint encoder/denoiser training under the conditional CFM loss, with
//! parameter EMA and sampling-weight collection.

mod decompose;
mod weights;

pub use decompose::{decompose_loss, Decomposition, Estimate, McConfig, MIN_MC_SAMPLES};
pub use weights::{collect_weights_offline, collect_weights_online, SamplingWeights, DENSE_LIMIT};

use alloc::vec;
use alloc::vec::Vec;

use crate::denoiser::{Parameterization, Preconditioning};
use crate::flows::{FiniteDataset, FlowFamily, FlowSpec};
use crate::model::Model;
use crate::rng::{self, Rng};
use crate::tensor::nn::ParamSet;
use crate::tensor::{ema_update, Optimizer, OptimizerConfig, OptimizerKind, StepOutcome, Tape, Tensor, Var};
use crate::{Error, Result};

/// Distribution of training times.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeDistribution {
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// `exp(N(mean, std^2))`, clamped into the flow's sampling range.
    LogNormal {
        mean: f64,
        std: f64,
    },
}

impl TimeDistribution {
    pub fn sample(&self, rng: &mut Rng, flow: &FlowSpec) -> f64 {
        match *self {
            TimeDistribution::Uniform { lo, hi } => rng::uniform(rng, lo, hi),
            TimeDistribution::LogNormal { mean, std } => {
                libm::exp(mean + std * rng::normal(rng)).clamp(flow.sample_floor, flow.t_max)
            }
        }
    }

    fn validate(&self, flow: &FlowSpec) -> Result<()> {
        let ok = match *self {
            TimeDistribution::Uniform { lo, hi } => lo > flow.t_min && lo < hi && hi <= flow.t_max,
            TimeDistribution::LogNormal { mean, std } => mean.is_finite() && std > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(alloc::format!(
                "time distribution {self:?} does not fit the flow"
            )))
        }
    }
}

/// Per-sample loss weight `lambda(t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossWeighting {
    Unit,
    /// `(t^2 + sigma_data^2) / (t sigma_data)^2`.
    Edm {
        sigma_data: f64,
    },
}

impl LossWeighting {
    pub fn weight(&self, t: f64) -> f64 {
        match *self {
            LossWeighting::Unit => 1.0,
            LossWeighting::Edm { sigma_data } => {
                let sd2 = sigma_data * sigma_data;
                (t * t + sd2) / (t * t * sd2)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub flow: FlowSpec,
    pub time: TimeDistribution,
    pub weighting: LossWeighting,
    pub optimizer: OptimizerConfig,
    /// EMA decay `mu` for parameter shadows and sampling weights.
    pub ema_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
}

impl TrainConfig {
    /// Rectified flow, `t ~ U[0.001, 1]`, unit weighting, Adam.
    pub fn rectified(steps: u64, seed: u64) -> Self {
        Self {
            flow: FlowSpec::rectified(),
            time: TimeDistribution::Uniform { lo: 1e-3, hi: 1.0 },
            weighting: LossWeighting::Unit,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::ADAM,
                lr: 2e-3,
            },
            ema_decay: 0.999,
            batch_size: 256,
            steps,
            seed,
        }
    }

    /// EDM flow, log-normal(-1.2, 1.2) noise levels, EDM weighting.
    pub fn edm(steps: u64, seed: u64) -> Self {
        let flow = FlowSpec::edm();
        Self {
            flow,
            time: TimeDistribution::LogNormal { mean: -1.2, std: 1.2 },
            weighting: LossWeighting::Edm {
                sigma_data: flow.sigma_data,
            },
            ..Self::rectified(steps, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.time.validate(&self.flow)?;
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::invalid(alloc::format!(
                "EMA decay {} outside (0, 1)",
                self.ema_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::EmptyBatch);
        }
        if !(self.optimizer.lr >= 0.0) {
            return Err(Error::invalid("learning rate must be nonnegative"));
        }
        if let LossWeighting::Edm { sigma_data } = self.weighting {
            if !(sigma_data > 0.0) {
                return Err(Error::invalid("sigma_data must be positive"));
            }
        }
        Ok(())
    }
}

/// One training batch: clean rows, per-row times and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub noise: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Draws `size` data rows by weight, times from `time` and unit noise.
    pub fn sample(data: &FiniteDataset, config: &TrainConfig, size: usize, rng: &mut Rng) -> Self {
        let dim = data.dim();
        let mut x = Vec::with_capacity(size * dim);
        let mut t = Vec::with_capacity(size);
        for _ in 0..size {
            x.extend_from_slice(data.point(data.sample_index(rng)));
            t.push(config.time.sample(rng, &config.flow));
        }
        let noise = rng::normals(rng, size * dim);
        Self { x, t, noise }
    }
}

/// `mean_b weight_b * |pred_b - target_b|^2` over `[B, D]` rows.
pub fn regression_loss(tape: &mut Tape, pred: Var, target: &[f64], weights: &[f64]) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    let rows = weights.len();
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    if shape.len() != 2 || shape[0] != rows || shape[0] * shape[1] != target.len() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: shape,
            rhs: vec![rows, target.len() / rows],
        });
    }
    let dim = shape[1];
    let target = tape.constant(Tensor::matrix(rows, dim, target.to_vec())?)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    let w: Vec<f64> = weights.iter().flat_map(|&w| core::iter::repeat_n(w, dim)).collect();
    let w = tape.constant(Tensor::matrix(rows, dim, w)?)?;
    let weighted = tape.mul(sq, w)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, 1.0 / rows as f64)
}

/// Records the conditional CFM loss of `batch` on `tape`.
///
/// Under the denoiser parameterization the loss is
/// `mean lambda(t) |x - D(x_t, t, y_q)|^2`; under the velocity
/// parameterization `mean lambda(t) |dX_t/dt - v(x_t, t, y_q)|^2`. `y_q` is
/// the straight-through code of the clean rows, so gradients reach both
/// `den_vars` and `enc_vars`. Returns the loss and the batch's code indices.
pub fn cfm_loss(
    tape: &mut Tape,
    model: &Model,
    den_vars: &[Var],
    enc_vars: Option<&[Var]>,
    batch: &Batch,
    weighting: &LossWeighting,
) -> Result<(Var, Vec<u64>)> {
    let rows = batch.len();
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    let dim = model.denoiser.config().data_dim;
    if batch.x.len() != rows * dim || batch.noise.len() != rows * dim {
        return Err(Error::ShapeMismatch {
            op: "batch",
            lhs: vec![rows, dim],
            rhs: vec![batch.x.len()],
        });
    }
    let (digits, codes) = match (&model.encoder, enc_vars) {
        (Some(enc), Some(vars)) => {
            let x = tape.constant(Tensor::matrix(rows, dim, batch.x.clone())?)?;
            let (q, codes) = enc.encode_on_tape(tape, vars, x)?;
            (Some(q), codes.iter().map(|c| c.index()).collect())
        }
        (None, None) => (None, Vec::new()),
        _ => return Err(Error::invalid("encoder parameters must match the model")),
    };
    let flow = &model.flow;
    let mut x_t = Vec::with_capacity(rows * dim);
    let mut target = Vec::with_capacity(rows * dim);
    let velocity_form = model.denoiser.config().parameterization == Parameterization::Velocity;
    for ((x0, n), &t) in batch.x.chunks(dim).zip(batch.noise.chunks(dim)).zip(&batch.t) {
        x_t.extend(flow.interpolate(x0, n, t)?);
        if velocity_form {
            target.extend(flow.velocity(x0, n, t)?);
        } else {
            target.extend_from_slice(x0);
        }
    }
    let pred = model.denoiser.predict(tape, den_vars, &x_t, &batch.t, digits)?;
    let weights: Vec<f64> = batch.t.iter().map(|&t| weighting.weight(t)).collect();
    let loss = regression_loss(tape, pred, &target, &weights)?;
    Ok((loss, codes))
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// The live model.
    pub model: Model,
    pub ema_denoiser: ParamSet,
    pub ema_encoder: Option<ParamSet>,
    pub opt_denoiser: Optimizer,
    pub opt_encoder: Option<Optimizer>,
    /// Online sampling weights; present for conditional models.
    pub weights: Option<SamplingWeights>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub codes: Vec<u64>,
    pub outcome: StepOutcome,
}

impl TrainState {
    pub fn new(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        if config.flow != model.flow {
            return Err(Error::invalid("training flow differs from the model's flow"));
        }
        if matches!(model.denoiser.config().preconditioning, Preconditioning::Edm { .. })
            && config.flow.family != FlowFamily::LinearEdm
        {
            return Err(Error::invalid("EDM preconditioning requires the EDM flow"));
        }
        let ema_denoiser = model.denoiser.params().clone();
        let ema_encoder = model.encoder.as_ref().map(|e| e.params().clone());
        let opt_denoiser = Optimizer::new(config.optimizer, model.denoiser.params().tensors());
        let opt_encoder = model
            .encoder
            .as_ref()
            .map(|e| Optimizer::new(config.optimizer, e.params().tensors()));
        let weights = match model.encoder.as_ref() {
            Some(e) => Some(SamplingWeights::new(e.codebook().size(), config.ema_decay)?),
            None => None,
        };
        Ok(Self {
            config,
            model,
            ema_denoiser,
            ema_encoder,
            opt_denoiser,
            opt_encoder,
            weights,
            step: 0,
        })
    }

    /// The batch for the current step, drawn from a stream keyed by
    /// `(seed, step)` so resumed runs see the same batches.
    pub fn next_batch(&self, data: &FiniteDataset) -> Batch {
        let mut r = rng::stream(self.config.seed, self.step);
        Batch::sample(data, &self.config, self.config.batch_size, &mut r)
    }

    /// Sets the learning rate of both optimizers. With `0.0` the networks
    /// stay fixed while batches still update the EMA shadows and the online
    /// weights.
    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::invalid("learning rate must be nonnegative"));
        }
        self.config.optimizer.lr = lr;
        self.opt_denoiser.set_learning_rate(lr);
        if let Some(o) = self.opt_encoder.as_mut() {
            o.set_learning_rate(lr);
        }
        Ok(())
    }

    /// The model with EMA parameters.
    pub fn ema_model(&self) -> Result<Model> {
        let denoiser = self.model.denoiser.with_params(self.ema_denoiser.clone())?;
        let encoder = match (&self.model.encoder, &self.ema_encoder) {
            (Some(e), Some(p)) => Some(e.with_params(p.clone())?),
            _ => None,
        };
        Model::new(self.model.flow, denoiser, encoder)
    }

    /// Runs `config.steps - step` more steps on `data`, calling `on_step`
    /// after each.
    pub fn run(&mut self, data: &FiniteDataset, mut on_step: impl FnMut(&TrainState, &StepReport)) -> Result<()> {
        while self.step < self.config.steps {
            let batch = self.next_batch(data);
            let report = train_step(self, &batch)?;
            on_step(self, &report);
        }
        Ok(())
    }
}

/// One joint step: encode, quantize, noise, loss, gradient step on both
/// nets, parameter EMA, code counting and sampling-weight EMA. On error the
/// state is left untouched.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    let mut tape = Tape::new();
    let den_vars = state.model.denoiser.params().attach(&mut tape, true)?;
    let enc_vars = match &state.model.encoder {
        Some(e) => Some(e.params().attach(&mut tape, true)?),
        None => None,
    };
    let (loss, codes) = cfm_loss(
        &mut tape,
        &state.model,
        &den_vars,
        enc_vars.as_deref(),
        batch,
        &state.config.weighting,
    )?;
    let loss_value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let den_grads = ParamSet::grads(&tape, &den_vars);
    let enc_grads = enc_vars.as_ref().map(|v| ParamSet::grads(&tape, v));

    // Validate the weight update before mutating anything.
    let mut weights = state.weights.clone();
    if let Some(w) = weights.as_mut() {
        collect_weights_online(w, &codes)?;
    }

    let mu = state.config.ema_decay;
    let mut outcome = state
        .opt_denoiser
        .step(state.model.denoiser.params_mut().tensors_mut(), &den_grads)?;
    if let (Some(enc), Some(opt), Some(g)) = (state.model.encoder.as_mut(), state.opt_encoder.as_mut(), enc_grads) {
        let o = opt.step(enc.params_mut().tensors_mut(), &g)?;
        if outcome == StepOutcome::Applied {
            outcome = o;
        }
    }
    ema_update(
        state.ema_denoiser.tensors_mut(),
        state.model.denoiser.params().tensors(),
        mu,
    )?;
    if let (Some(shadow), Some(enc)) = (state.ema_encoder.as_mut(), state.model.encoder.as_ref()) {
        ema_update(shadow.tensors_mut(), enc.params().tensors(), mu)?;
    }
    state.weights = weights;
    state.step += 1;
    Ok(StepReport {
        step: state.step,
        loss: loss_value,
        codes,
        outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, DenoiserNet};
    use crate::fsq::{CodebookConfig, EncoderArch, EncoderNet};
    use crate::toy::{self, ToyKind, ToySpec};

    fn ring(n: usize) -> FiniteDataset {
        toy::generate(&ToySpec {
            kind: ToyKind::RING8,
            count: n,
            seed: 0,
        })
        .unwrap()
    }

    fn model(conditional: bool, seed: u64) -> Model {
        let mut r = rng::seeded(seed);
        let cb = CodebookConfig::new(2, 4).unwrap();
        let cbo = conditional.then_some(cb);
        let den = DenoiserNet::new(DenoiserConfig::toy_velocity(2, cbo), &mut r).unwrap();
        let enc = conditional.then(|| {
            EncoderNet::new(
                EncoderArch::Mlp {
                    input_dim: 2,
                    hidden: 8,
                },
                cb,
                &mut r,
            )
            .unwrap()
        });
        Model::new(FlowSpec::rectified(), den, enc).unwrap()
    }

    #[test]
    fn regression_loss_examples() {
        let mut tape = Tape::new();
        let x = [1.0, -2.0, 0.5];
        // Perfect prediction.
        let p = tape.constant(Tensor::matrix(1, 3, x.to_vec()).unwrap()).unwrap();
        let l = regression_loss(&mut tape, p, &x, &[1.0]).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        // Zero prediction, unit weight: |x|^2.
        let z = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        let l = regression_loss(&mut tape, z, &x, &[1.0]).unwrap();
        assert_eq!(tape.value(l).data(), &[5.25]);
        assert_eq!(regression_loss(&mut tape, z, &[], &[]).unwrap_err(), Error::EmptyBatch);
    }

    #[test]
    fn edm_weighting_matches_formula() {
        let w = LossWeighting::Edm { sigma_data: 0.5 };
        assert!((w.weight(0.5) - 8.0).abs() < 1e-12);
        assert_eq!(LossWeighting::Unit.weight(3.0), 1.0);
    }

    #[test]
    fn zero_learning_rate_keeps_params_but_collects_weights() {
        let data = ring(64);
        let mut cfg = TrainConfig::rectified(1, 3);
        cfg.optimizer.lr = 0.0;
        cfg.batch_size = 16;
        let mut state = TrainState::new(cfg, model(true, 1)).unwrap();
        let before = state.model.clone();
        let batch = state.next_batch(&data);
        let report = train_step(&mut state, &batch).unwrap();
        assert_eq!(state.model, before);
        let w = state.weights.as_ref().unwrap();
        assert!((w.total() - (1.0 - cfg.ema_decay)).abs() < 1e-15);
        assert_eq!(report.codes.len(), 16);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn encoder_receives_gradient() {
        let data = ring(64);
        let m = model(true, 2);
        let cfg = TrainConfig::rectified(1, 0);
        let state = TrainState::new(cfg, m).unwrap();
        let batch = state.next_batch(&data);
        let mut tape = Tape::new();
        // Use a live output layer so the condition path reaches the loss.
        let mut den = state.model.denoiser.clone();
        den.params_mut()
            .get_mut("den.out.weight")
            .unwrap()
            .data_mut()
            .fill(0.05);
        let m = Model::new(state.model.flow, den, state.model.encoder.clone()).unwrap();
        let dv = m.denoiser.params().attach(&mut tape, true).unwrap();
        let ev = m.encoder.as_ref().unwrap().params().attach(&mut tape, true).unwrap();
        let (loss, _) = cfm_loss(&mut tape, &m, &dv, Some(&ev), &batch, &LossWeighting::Unit).unwrap();
        tape.backward(loss).unwrap();
        let g = ParamSet::grads(&tape, &ev);
        assert!(g.iter().any(|t| t.data().iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn short_run_reduces_loss() {
        let data = ring(512);
        let mut cfg = TrainConfig::rectified(200, 7);
        cfg.batch_size = 64;
        let mut state = TrainState::new(cfg, model(true, 5)).unwrap();
        let mut losses = Vec::new();
        state.run(&data, |_, r| losses.push(r.loss)).unwrap();
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let data = ring(128);
        let mut cfg = TrainConfig::rectified(6, 1);
        cfg.batch_size = 8;
        let mut full = TrainState::new(cfg, model(true, 9)).unwrap();
        full.run(&data, |_, _| {}).unwrap();

        let mut part = TrainState::new(TrainConfig { steps: 3, ..cfg }, model(true, 9)).unwrap();
        part.run(&data, |_, _| {}).unwrap();
        let mut resumed = part.clone();
        resumed.config.steps = 6;
        resumed.run(&data, |_, _| {}).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn freezing_mid_run_settles_online_weights() {
        let data = ring(512);
        let mut cfg = TrainConfig::rectified(20, 3);
        cfg.batch_size = 64;
        let mut state = TrainState::new(cfg, model(true, 4)).unwrap();
        state.run(&data, |_, _| {}).unwrap();
        assert!(state.set_learning_rate(-1.0).is_err());
        state.set_learning_rate(0.0).unwrap();
        let before = state.model.clone();
        state.config.steps = 400;
        state.run(&data, |_, _| {}).unwrap();
        assert_eq!(state.model, before);
        let offline = collect_weights_offline(before.encoder.as_ref().unwrap(), &data).unwrap();
        let tv = state.weights.as_ref().unwrap().tv_distance(&offline).unwrap();
        assert!(tv < 0.05, "{tv}");
    }
}
