//! Monte-Carlo split of the CFM loss into a fitting term and the
//! net-independent intersection term, using the exact posterior velocity.

use alloc::vec::Vec;

use crate::flows::{posterior_spread, FiniteDataset, FlowSpec};
use crate::model::{OracleVelocity, VelocityPredictor};
use crate::rng;
use crate::{Error, Result};

pub const MIN_MC_SAMPLES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
    /// `t ~ U[t_lo, t_hi]`.
    pub t_lo: f64,
    pub t_hi: f64,
    /// Condition the predictor and the oracle on the dataset's codes.
    pub conditional: bool,
    /// Also estimate the intersection term by averaging the exact posterior
    /// spread at each sampled `X_t` (lower variance, same expectation).
    pub rao_blackwell: bool,
}

impl McConfig {
    /// Uniform times over `[oracle_floor, t_max]`.
    pub fn new(flow: &FlowSpec, samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            t_lo: flow.oracle_floor(),
            t_hi: flow.t_max,
            conditional: false,
            rao_blackwell: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    /// Standard error of the mean.
    pub se: f64,
}

fn estimate(values: &[f64]) -> Estimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Estimate {
        mean,
        se: libm::sqrt(var / n),
    }
}

/// `L_CFM`, `L_FM` and `V` estimated on common samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition {
    /// `E |dX_t/dt - v|^2`.
    pub l_cfm: Estimate,
    /// `E |E[dX_t/dt | X_t] - v|^2`.
    pub l_fm: Estimate,
    /// `E |dX_t/dt - E[dX_t/dt | X_t]|^2`.
    pub v: Estimate,
    /// `L_CFM - L_FM - V`, estimated from the paired per-sample residual.
    pub residual: Estimate,
    /// Posterior-spread estimate of `V` when requested.
    pub v_rb: Option<Estimate>,
    pub samples: usize,
}

/// Estimates the three terms for `predictor` on `data` under `flow`.
pub fn decompose_loss(
    predictor: &dyn VelocityPredictor,
    flow: &FlowSpec,
    data: &FiniteDataset,
    mc: &McConfig,
) -> Result<Decomposition> {
    if mc.samples < MIN_MC_SAMPLES {
        return Err(Error::TooFewSamples {
            got: mc.samples,
            min: MIN_MC_SAMPLES,
        });
    }
    if !(mc.t_lo >= flow.oracle_floor() && mc.t_lo < mc.t_hi && mc.t_hi <= flow.t_max) {
        return Err(Error::invalid(alloc::format!(
            "MC time range [{}, {}] must lie within [{}, {}]",
            mc.t_lo,
            mc.t_hi,
            flow.oracle_floor(),
            flow.t_max
        )));
    }
    if predictor.dim() != data.dim() {
        return Err(Error::ShapeMismatch {
            op: "decompose_loss",
            lhs: alloc::vec![data.dim()],
            rhs: alloc::vec![predictor.dim()],
        });
    }
    if mc.conditional && data.codes().is_none() {
        return Err(Error::invalid("conditional decomposition needs dataset codes"));
    }
    let oracle = OracleVelocity {
        flow: *flow,
        data,
        conditional: mc.conditional,
    };
    let dim = data.dim();
    let mut r = rng::seeded(mc.seed);
    let (mut c, mut f, mut v, mut res, mut rb) = (
        Vec::with_capacity(mc.samples),
        Vec::with_capacity(mc.samples),
        Vec::with_capacity(mc.samples),
        Vec::with_capacity(mc.samples),
        Vec::new(),
    );
    const CHUNK: usize = 512;
    let mut done = 0;
    while done < mc.samples {
        let n = CHUNK.min(mc.samples - done);
        let mut x_t = Vec::with_capacity(n * dim);
        let mut target = Vec::with_capacity(n * dim);
        let mut ts = Vec::with_capacity(n);
        let mut codes = Vec::with_capacity(n);
        for _ in 0..n {
            let i = data.sample_index(&mut r);
            let t = rng::uniform(&mut r, mc.t_lo, mc.t_hi);
            let noise = rng::normals(&mut r, dim);
            x_t.extend(flow.interpolate(data.point(i), &noise, t)?);
            target.extend(flow.velocity(data.point(i), &noise, t)?);
            ts.push(t);
            if mc.conditional {
                codes.push(data.code(i).unwrap_or(0));
            }
        }
        let codes = mc.conditional.then_some(codes.as_slice());
        let pred = predictor.predict(&x_t, &ts, codes)?;
        let post = oracle.predict(&x_t, &ts, codes)?;
        for k in 0..n {
            let row = k * dim..(k + 1) * dim;
            let (mut ck, mut fk, mut vk) = (0.0, 0.0, 0.0);
            for j in row {
                let (xd, p, o) = (target[j], pred[j], post[j]);
                ck += (xd - p) * (xd - p);
                fk += (o - p) * (o - p);
                vk += (xd - o) * (xd - o);
            }
            c.push(ck);
            f.push(fk);
            v.push(vk);
            res.push(ck - fk - vk);
            if mc.rao_blackwell {
                rb.push(posterior_spread(
                    flow,
                    data,
                    &x_t[k * dim..(k + 1) * dim],
                    ts[k],
                    mc.conditional,
                )?);
            }
        }
        done += n;
    }
    Ok(Decomposition {
        l_cfm: estimate(&c),
        l_fm: estimate(&f),
        v: estimate(&v),
        residual: estimate(&res),
        v_rb: mc.rao_blackwell.then(|| estimate(&rb)),
        samples: mc.samples,
    })
}
