use alloc::vec::Vec;

use crate::flows::{FiniteDataset, FlowSpec};
use crate::model::VelocityPredictor;
use crate::rng::{self, Rng};
use crate::training::MIN_MC_SAMPLES;
use crate::{Error, Result};

/// `l_CFM(t) = (E |dX_t/dt - v(X_t, t, Y)|^2)^(1/2)` on a time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LossProfile {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Standard error of each `l_CFM(t)^2` estimate.
    pub squared_se: Vec<f64>,
    /// Trapezoidal `int l_CFM(t)^2 dt` over the grid (`w_t = 1`).
    pub integral: f64,
    /// Standard error of `integral` from the per-point errors.
    pub integral_se: f64,
}

impl LossProfile {
    /// `integral / (t_last - t_first)`: comparable to a loss averaged over
    /// uniform times on the same range.
    pub fn time_average(&self) -> (f64, f64) {
        let span = (self.times[self.times.len() - 1] - self.times[0]).abs();
        (self.integral / span, self.integral_se / span)
    }
}

/// Estimates `l_CFM` at each of `times` with `samples` draws per time.
/// With `conditional`, each draw uses its datum's code from `data`.
pub fn l_cfm_profile(
    predictor: &dyn VelocityPredictor,
    flow: &FlowSpec,
    data: &FiniteDataset,
    times: &[f64],
    samples: usize,
    conditional: bool,
    seed: u64,
) -> Result<LossProfile> {
    if samples < MIN_MC_SAMPLES {
        return Err(Error::TooFewSamples {
            got: samples,
            min: MIN_MC_SAMPLES,
        });
    }
    if times.len() < 2 {
        return Err(Error::invalid("profile needs at least two times"));
    }
    if conditional && data.codes().is_none() {
        return Err(Error::invalid("conditional profile needs dataset codes"));
    }
    let mut values = Vec::with_capacity(times.len());
    let mut sq = Vec::with_capacity(times.len());
    let mut sq_se = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let mut r = rng::stream(seed, k as u64);
        let (mean, se) = squared_loss_at(predictor, flow, data, t, samples, conditional, &mut r)?;
        values.push(libm::sqrt(mean));
        sq.push(mean);
        sq_se.push(se);
    }
    let mut integral = 0.0;
    let mut var = 0.0;
    let m = times.len();
    for i in 0..m {
        // Trapezoid weight of node i.
        let left = if i > 0 {
            (times[i] - times[i - 1]).abs() / 2.0
        } else {
            0.0
        };
        let right = if i + 1 < m {
            (times[i + 1] - times[i]).abs() / 2.0
        } else {
            0.0
        };
        let w = left + right;
        integral += w * sq[i];
        var += w * w * sq_se[i] * sq_se[i];
    }
    Ok(LossProfile {
        times: times.to_vec(),
        values,
        squared_se: sq_se,
        integral,
        integral_se: libm::sqrt(var),
    })
}

/// Mean and standard error of `|dX_t/dt - v(X_t, t, Y)|^2` at one time.
pub(crate) fn squared_loss_at(
    predictor: &dyn VelocityPredictor,
    flow: &FlowSpec,
    data: &FiniteDataset,
    t: f64,
    samples: usize,
    conditional: bool,
    r: &mut Rng,
) -> Result<(f64, f64)> {
    let dim = data.dim();
    let mut x_t = Vec::with_capacity(samples * dim);
    let mut target = Vec::with_capacity(samples * dim);
    let mut codes = Vec::new();
    for _ in 0..samples {
        let i = data.sample_index(r);
        let noise = rng::normals(r, dim);
        x_t.extend(flow.interpolate(data.point(i), &noise, t)?);
        target.extend(flow.velocity(data.point(i), &noise, t)?);
        if conditional {
            codes.push(data.code(i).unwrap_or(0));
        }
    }
    let ts = alloc::vec![t; samples];
    let pred = predictor.predict(&x_t, &ts, conditional.then_some(codes.as_slice()))?;
    let per: Vec<f64> = target
        .chunks(dim)
        .zip(pred.chunks(dim))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect();
    let n = samples as f64;
    let mean = per.iter().sum::<f64>() / n;
    let var = per.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if !mean.is_finite() {
        return Err(Error::NonFinite("l_cfm"));
    }
    Ok((mean, libm::sqrt(var / n)))
}
