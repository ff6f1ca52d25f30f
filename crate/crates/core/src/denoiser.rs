//! The conditional denoiser `D(x_t, t, y)` and its velocity view.
//!
//! The trunk is an MLP (optionally behind a 3x3 conv stem for images). A
//! sinusoidal time embedding and, for conditional models, a two-layer
//! embedding of the centered code digits are summed and added before every
//! hidden activation.

use alloc::vec;
use alloc::vec::Vec;

use crate::flows::FlowSpec;
use crate::fsq::CodebookConfig;
use crate::rng::Rng;
use crate::tensor::nn::{Conv2d, Init, Linear, ParamSet};
use crate::tensor::{Conv2dSpec, Tape, Tensor, Var};
use crate::{Error, Result};

/// `[C, H, W]` layout of image rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// What the network output means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Parameterization {
    /// The clean-data estimate `D`.
    Denoiser,
    /// The velocity `dX_t/dt` directly.
    Velocity,
}

/// Input/output scalings around the raw network `F`:
/// `D = c_skip x + c_out F(c_in x, c_noise)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Preconditioning {
    /// `c_skip = 0`, `c_out = c_in = 1`, `c_noise = t`.
    Identity,
    /// EDM scalings for `X_t = X_0 + t eps`.
    Edm { sigma_data: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scalings {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Preconditioning {
    pub fn scalings(&self, t: f64) -> Result<Scalings> {
        match *self {
            Preconditioning::Identity => Ok(Scalings {
                c_skip: 0.0,
                c_out: 1.0,
                c_in: 1.0,
                c_noise: t,
            }),
            Preconditioning::Edm { sigma_data } => {
                if !(t > 0.0) {
                    return Err(Error::BelowTimeFloor { t, floor: 0.0 });
                }
                let sd2 = sigma_data * sigma_data;
                let r = libm::sqrt(t * t + sd2);
                Ok(Scalings {
                    c_skip: sd2 / (t * t + sd2),
                    c_out: t * sigma_data / r,
                    c_in: 1.0 / r,
                    c_noise: libm::log(t) / 4.0,
                })
            }
        }
    }
}

/// Architecture and output convention of a [`DenoiserNet`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub hidden: usize,
    /// Number of hidden activations in the trunk (input layer included).
    pub depth: usize,
    /// Sinusoidal feature count, even.
    pub time_features: usize,
    /// Image rows get a conv stem with this many channels.
    pub image: Option<(ImageShape, usize)>,
    pub codebook: Option<CodebookConfig>,
    pub parameterization: Parameterization,
    pub preconditioning: Preconditioning,
}

impl DenoiserConfig {
    /// Velocity MLP for low-dimensional toy data.
    pub fn toy_velocity(data_dim: usize, codebook: Option<CodebookConfig>) -> Self {
        Self {
            data_dim,
            hidden: 64,
            depth: 4,
            time_features: 64,
            image: None,
            codebook,
            parameterization: Parameterization::Velocity,
            preconditioning: Preconditioning::Identity,
        }
    }

    /// EDM-preconditioned denoiser for toy data.
    pub fn toy_edm(data_dim: usize, codebook: Option<CodebookConfig>, sigma_data: f64) -> Self {
        Self {
            parameterization: Parameterization::Denoiser,
            preconditioning: Preconditioning::Edm { sigma_data },
            ..Self::toy_velocity(data_dim, codebook)
        }
    }

    /// EDM-preconditioned denoiser over images with a conv stem.
    pub fn image_edm(shape: ImageShape, codebook: Option<CodebookConfig>, sigma_data: f64) -> Self {
        Self {
            data_dim: shape.numel(),
            hidden: 128,
            depth: 3,
            time_features: 64,
            image: Some((shape, 8)),
            codebook,
            parameterization: Parameterization::Denoiser,
            preconditioning: Preconditioning::Edm { sigma_data },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(Error::invalid("denoiser dimensions must be positive"));
        }
        if self.time_features < 4 || !self.time_features.is_multiple_of(2) {
            return Err(Error::invalid("time features must be an even count >= 4"));
        }
        if let Some((shape, stem)) = self.image {
            if shape.numel() != self.data_dim || stem == 0 {
                return Err(Error::invalid("image shape does not match the data dimension"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    stem: Option<Conv2d>,
    input: Linear,
    hidden: Vec<Linear>,
    output: Linear,
    time: Linear,
    cond: Option<[Linear; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    layers: Layers,
    params: ParamSet,
}

/// Sinusoidal features of `tau`, frequencies log-spaced on `[1, 100]`.
pub fn time_features(tau: f64, count: usize) -> Vec<f64> {
    let half = count / 2;
    let mut out = vec![0.0; count];
    for k in 0..half {
        let w = libm::exp(libm::log(100.0) * k as f64 / (half - 1) as f64);
        let (s, c) = libm::sincos(w * tau);
        out[k] = s;
        out[half + k] = c;
    }
    out
}

impl DenoiserNet {
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut params = ParamSet::new();
        let (stem, in_dim) = match config.image {
            Some((shape, stem)) => {
                let spec = Conv2dSpec { stride: 1, padding: 1 };
                let conv = Conv2d::init(&mut params, "den.stem", (shape.channels, stem, 3), spec, rng);
                (Some(conv), stem * shape.height * shape.width)
            }
            None => (None, config.data_dim),
        };
        let input = Linear::init(&mut params, "den.in", in_dim, h, Init::DEFAULT, rng);
        let hidden = (1..config.depth)
            .map(|i| Linear::init(&mut params, &alloc::format!("den.h{i}"), h, h, Init::DEFAULT, rng))
            .collect();
        let output = Linear::init(&mut params, "den.out", h, config.data_dim, Init::Zeros, rng);
        let time = Linear::init(&mut params, "den.time", config.time_features, h, Init::DEFAULT, rng);
        let cond = config.codebook.map(|cb| {
            [
                Linear::init(&mut params, "den.cond0", cb.channels(), h, Init::DEFAULT, rng),
                Linear::init(&mut params, "den.cond1", h, h, Init::DEFAULT, rng),
            ]
        });
        Ok(Self {
            config,
            layers: Layers {
                stem,
                input,
                hidden,
                output,
                time,
                cond,
            },
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
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

    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        if !params.same_layout(&self.params) {
            return Err(Error::LayoutMismatch("denoiser parameters".into()));
        }
        Ok(Self { params, ..self.clone() })
    }

    /// Zeroes the two condition-embedding layers, making the output
    /// independent of the code.
    pub fn zero_condition_embedding(&mut self) {
        if let Some(cond) = self.layers.cond {
            for l in cond {
                for idx in [l.weight, l.bias] {
                    self.params.tensors_mut()[idx].data_mut().fill(0.0);
                }
            }
        }
    }

    /// Zeroes the output layer, so `F == 0`.
    pub fn zero_output(&mut self) {
        let l = self.layers.output;
        for idx in [l.weight, l.bias] {
            self.params.tensors_mut()[idx].data_mut().fill(0.0);
        }
    }

    /// Raw network `F(x_in, c_noise, y)` over `[B, D]`. `digits` holds the
    /// uncentered code digits `[B, d]` (a straight-through tensor during
    /// training) and is required exactly when the net is conditional.
    pub fn network(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x_in: Var,
        c_noise: &[f64],
        digits: Option<Var>,
    ) -> Result<Var> {
        let rows = c_noise.len();
        let shape = tape.value(x_in).shape().to_vec();
        if shape != [rows, self.config.data_dim] {
            return Err(Error::ShapeMismatch {
                op: "denoiser",
                lhs: vec![rows, self.config.data_dim],
                rhs: shape,
            });
        }
        let l = &self.layers;
        let feats: Vec<f64> = c_noise
            .iter()
            .flat_map(|&tau| time_features(tau, self.config.time_features))
            .collect();
        let feats = tape.constant(Tensor::matrix(rows, self.config.time_features, feats)?)?;
        let mut emb = l.time.forward(tape, vars, feats)?;
        match (&l.cond, self.config.codebook, digits) {
            (Some(cond), Some(cb), Some(y)) => {
                let ys = tape.value(y).shape().to_vec();
                if ys != [rows, cb.channels()] {
                    return Err(Error::ShapeMismatch {
                        op: "condition",
                        lhs: vec![rows, cb.channels()],
                        rhs: ys,
                    });
                }
                let centered = tape.shift(y, -cb.center())?;
                let c = cond[0].forward(tape, vars, centered)?;
                let c = tape.silu(c)?;
                let c = cond[1].forward(tape, vars, c)?;
                emb = tape.add(emb, c)?;
            }
            (None, _, None) => {}
            (Some(_), _, None) => return Err(Error::invalid("conditional denoiser needs a code")),
            _ => return Err(Error::invalid("unconditional denoiser given a code")),
        }

        let mut h = match (l.stem, self.config.image) {
            (Some(stem), Some((s, _))) => {
                let img = tape.reshape(x_in, &[rows, s.channels, s.height, s.width])?;
                let f = stem.forward(tape, vars, img)?;
                let f = tape.silu(f)?;
                let flat = tape.value(f).numel() / rows;
                tape.reshape(f, &[rows, flat])?
            }
            _ => x_in,
        };
        h = l.input.forward(tape, vars, h)?;
        h = tape.add(h, emb)?;
        h = tape.silu(h)?;
        for layer in &l.hidden {
            h = layer.forward(tape, vars, h)?;
            h = tape.add(h, emb)?;
            h = tape.silu(h)?;
        }
        l.output.forward(tape, vars, h)
    }

    /// The parameterized prediction for constant `x_t` rows at per-row
    /// times: `D` under the denoiser parameterization (preconditioned),
    /// the velocity otherwise.
    pub fn predict(&self, tape: &mut Tape, vars: &[Var], x_t: &[f64], t: &[f64], digits: Option<Var>) -> Result<Var> {
        let dim = self.config.data_dim;
        let rows = t.len();
        if x_t.len() != rows * dim {
            return Err(Error::ShapeMismatch {
                op: "denoiser",
                lhs: vec![rows, dim],
                rhs: vec![x_t.len()],
            });
        }
        match self.config.parameterization {
            Parameterization::Velocity => {
                let x = tape.constant(Tensor::matrix(rows, dim, x_t.to_vec())?)?;
                self.network(tape, vars, x, t, digits)
            }
            Parameterization::Denoiser => {
                let sc: Vec<Scalings> = t
                    .iter()
                    .map(|&ti| self.config.preconditioning.scalings(ti))
                    .collect::<Result<_>>()?;
                let per_row = |f: &dyn Fn(&Scalings, f64) -> f64| -> Result<Tensor> {
                    let data = x_t
                        .chunks(dim)
                        .zip(&sc)
                        .flat_map(|(row, s)| row.iter().map(move |&v| f(s, v)))
                        .collect();
                    Tensor::matrix(rows, dim, data)
                };
                let x_in = tape.constant(per_row(&|s, v| s.c_in * v)?)?;
                let c_noise: Vec<f64> = sc.iter().map(|s| s.c_noise).collect();
                let f = self.network(tape, vars, x_in, &c_noise, digits)?;
                let c_out = tape.constant(per_row(&|s, _| s.c_out)?)?;
                let skip = tape.constant(per_row(&|s, v| s.c_skip * v)?)?;
                let scaled = tape.mul(c_out, f)?;
                tape.add(skip, scaled)
            }
        }
    }

    /// Inference-time prediction without gradients. `digits` is the flat
    /// `[B, d]` digit table for conditional nets.
    pub fn predict_rows(&self, x_t: &[f64], t: &[f64], digits: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape, false)?;
        let y = match (digits, self.config.codebook) {
            (Some(d), Some(cb)) => Some(tape.constant(Tensor::matrix(t.len(), cb.channels(), d.to_vec())?)?),
            (Some(_), None) => return Err(Error::invalid("unconditional denoiser given a code")),
            (None, _) => None,
        };
        let out = self.predict(&mut tape, &vars, x_t, t, y)?;
        Ok(tape.value(out).clone().into_data())
    }

    /// Clean-data estimates for each row.
    pub fn denoise(&self, flow: &FlowSpec, x_t: &[f64], t: &[f64], digits: Option<&[f64]>) -> Result<Vec<f64>> {
        let p = self.predict_rows(x_t, t, digits)?;
        match self.config.parameterization {
            Parameterization::Denoiser => Ok(p),
            Parameterization::Velocity => convert_rows(flow, x_t, t, &p, denoised_from_velocity),
        }
    }

    /// Velocities for each row, the field fed to the solvers.
    pub fn velocity(&self, flow: &FlowSpec, x_t: &[f64], t: &[f64], digits: Option<&[f64]>) -> Result<Vec<f64>> {
        let p = self.predict_rows(x_t, t, digits)?;
        match self.config.parameterization {
            Parameterization::Velocity => Ok(p),
            Parameterization::Denoiser => convert_rows(flow, x_t, t, &p, velocity_from_denoised),
        }
    }
}

/// Per-row map `(flow, x_t, t, prediction) -> output`.
type RowMap = fn(&FlowSpec, &[f64], f64, &[f64]) -> Result<Vec<f64>>;

fn convert_rows(flow: &FlowSpec, x_t: &[f64], t: &[f64], pred: &[f64], f: RowMap) -> Result<Vec<f64>> {
    let dim = x_t.len() / t.len().max(1);
    let mut out = Vec::with_capacity(x_t.len());
    for ((x, &ti), p) in x_t.chunks(dim).zip(t).zip(pred.chunks(dim)) {
        out.extend(f(flow, x, ti, p)?);
    }
    Ok(out)
}

/// Velocity implied by a clean-data estimate:
/// `a' D + s' (x - a D) / s`, i.e. `(x - D) / t` for the EDM flow.
pub fn velocity_from_denoised(flow: &FlowSpec, x_t: &[f64], t: f64, d: &[f64]) -> Result<Vec<f64>> {
    let c = flow.coefficients(t)?;
    if !(c.s > 0.0) || !c.ds.is_finite() {
        return Err(Error::BelowTimeFloor { t, floor: flow.t_min });
    }
    Ok(x_t
        .iter()
        .zip(d)
        .map(|(&x, &dv)| c.da * dv + c.ds * (x - c.a * dv) / c.s)
        .collect())
}

/// Inverse of [`velocity_from_denoised`]: `D = (v - (s'/s) x) / (a' - a s'/s)`.
pub fn denoised_from_velocity(flow: &FlowSpec, x_t: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
    let c = flow.coefficients(t)?;
    if !(c.s > 0.0) || !c.ds.is_finite() {
        return Err(Error::BelowTimeFloor { t, floor: flow.t_min });
    }
    let k = c.ds / c.s;
    let denom = c.da - c.a * k;
    Ok(x_t.iter().zip(v).map(|(&x, &vv)| (vv - k * x) / denom).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cb() -> CodebookConfig {
        CodebookConfig::new(2, 4).unwrap()
    }

    #[test]
    fn edm_scalings_at_sigma_data() {
        let s = Preconditioning::Edm { sigma_data: 0.5 }.scalings(0.5).unwrap();
        assert!((s.c_skip - 0.5).abs() < 1e-15);
        assert!((s.c_out - 0.25 / libm::sqrt(0.5)).abs() < 1e-15);
        assert!((s.c_in - 1.0 / libm::sqrt(0.5)).abs() < 1e-15);
        assert!(Preconditioning::Edm { sigma_data: 0.5 }.scalings(0.0).is_err());
    }

    #[test]
    fn zero_output_cases() {
        let flow = FlowSpec::edm();
        let x = [0.3, -1.2, 2.0, 0.5];
        let t = [0.7, 3.0];
        let digits = [0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0];

        let mut cfg = DenoiserConfig::toy_edm(2, Some(cb()), 0.5);
        cfg.preconditioning = Preconditioning::Identity;
        let net = DenoiserNet::new(cfg, &mut rng::seeded(0)).unwrap();
        assert_eq!(net.denoise(&flow, &x, &t, Some(&digits)).unwrap(), vec![0.0; 4]);

        let net = DenoiserNet::new(DenoiserConfig::toy_edm(2, Some(cb()), 0.5), &mut rng::seeded(0)).unwrap();
        let d = net.denoise(&flow, &x, &t, Some(&digits)).unwrap();
        for (i, &ti) in t.iter().enumerate() {
            let skip = 0.25 / (ti * ti + 0.25);
            for k in 0..2 {
                assert_eq!(d[2 * i + k], skip * x[2 * i + k]);
            }
        }
    }

    #[test]
    fn zeroed_condition_embedding_ignores_code() {
        let mut net = DenoiserNet::new(DenoiserConfig::toy_velocity(2, Some(cb())), &mut rng::seeded(4)).unwrap();
        // Make the output layer live so the test is not vacuous.
        for v in net.params_mut().get_mut("den.out.weight").unwrap().data_mut() {
            *v = 0.1;
        }
        let flow = FlowSpec::rectified();
        let x = [0.3, -1.2];
        let a = net.velocity(&flow, &x, &[0.4], Some(&[0.0, 0.0, 1.0, 1.0])).unwrap();
        let b = net.velocity(&flow, &x, &[0.4], Some(&[1.0, 1.0, 0.0, 1.0])).unwrap();
        assert_ne!(a, b);
        net.zero_condition_embedding();
        let a = net.velocity(&flow, &x, &[0.4], Some(&[0.0, 0.0, 1.0, 1.0])).unwrap();
        let b = net.velocity(&flow, &x, &[0.4], Some(&[1.0, 1.0, 0.0, 1.0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perfect_denoiser_on_one_point_gives_oracle_velocity() {
        let flow = FlowSpec::edm();
        let star = [1.0, -2.0];
        let x = [3.0, 0.5];
        let v = velocity_from_denoised(&flow, &x, 2.0, &star).unwrap();
        assert_eq!(v, vec![1.0, 1.25]);
        assert!(velocity_from_denoised(&flow, &x, 0.0, &star).is_err());
    }

    #[test]
    fn velocity_denoiser_conversion_round_trips() {
        let x = [0.7, -0.4, 1.9];
        let d = [0.1, 0.2, -0.3];
        for flow in [FlowSpec::edm(), FlowSpec::rectified(), FlowSpec::vp(), FlowSpec::ve()] {
            let t = 0.37 * flow.t_max;
            let v = velocity_from_denoised(&flow, &x, t, &d).unwrap();
            let back = denoised_from_velocity(&flow, &x, t, &v).unwrap();
            for k in 0..3 {
                assert!((back[k] - d[k]).abs() < 1e-12 * (1.0 + d[k].abs()), "{:?}", flow.family);
            }
        }
    }

    #[test]
    fn image_denoiser_runs_and_encoder_budget_holds() {
        let shape = ImageShape {
            channels: 1,
            height: 8,
            width: 8,
        };
        let cb = CodebookConfig::new(2, 8).unwrap();
        let net = DenoiserNet::new(DenoiserConfig::image_edm(shape, Some(cb), 0.5), &mut rng::seeded(1)).unwrap();
        assert!(net.param_count() > 100 * 324);
        let out = net
            .denoise(&FlowSpec::edm(), &vec![0.1; 128], &[1.0, 2.0], Some(&[1.0; 16]))
            .unwrap();
        assert_eq!(out.len(), 128);
    }

    #[test]
    fn condition_presence_is_checked() {
        let net = DenoiserNet::new(DenoiserConfig::toy_velocity(2, None), &mut rng::seeded(0)).unwrap();
        assert!(net
            .velocity(&FlowSpec::rectified(), &[0.0, 0.0], &[0.5], Some(&[1.0]))
            .is_err());
        let net = DenoiserNet::new(DenoiserConfig::toy_velocity(2, Some(cb())), &mut rng::seeded(0)).unwrap();
        assert!(net.velocity(&FlowSpec::rectified(), &[0.0, 0.0], &[0.5], None).is_err());
    }
}
