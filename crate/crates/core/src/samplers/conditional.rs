use alloc::vec::Vec;

use super::{solve, Counting, PredictorField, SolverConfig, TrajectoryRecord};
use crate::flows::FlowSpec;
use crate::model::{Model, VelocityPredictor};
use crate::rng::{self, Rng};
use crate::training::SamplingWeights;
use crate::{Error, Result};

/// Generated rows with the codes they were conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub x: Vec<f64>,
    pub codes: Option<Vec<u64>>,
    pub trajectory: TrajectoryRecord,
    /// Field evaluations, each covering the whole batch.
    pub nfe: u64,
}

/// Draws `count` samples: per sample a code index by `weights` (for
/// conditional predictors) and a prior draw, both from the stream
/// `(seed, i)`; then the whole batch is solved backward with each row's
/// code held fixed.
pub fn conditional_sample(
    predictor: &dyn VelocityPredictor,
    weights: Option<&SamplingWeights>,
    flow: &FlowSpec,
    solver: &SolverConfig,
    count: usize,
    seed: u64,
) -> Result<Samples> {
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let dim = predictor.dim();
    let conditional = predictor.codebook().is_some() || weights.is_some();
    if conditional && weights.is_none() {
        return Err(Error::invalid("conditional sampling needs sampling weights"));
    }
    if let Some(w) = weights {
        w.normalized()?;
    }
    let mut x_init = Vec::with_capacity(count * dim);
    let mut codes = Vec::with_capacity(if conditional { count } else { 0 });
    for i in 0..count {
        let mut r = rng::stream(seed, i as u64);
        if let Some(w) = weights {
            codes.push(w.sample(&mut r)?);
        }
        x_init.extend(flow.sample_prior(&mut r, dim));
    }
    let codes = conditional.then_some(codes);
    let mut field = Counting::new(PredictorField {
        predictor,
        codes: codes.clone(),
    });
    let trajectory = solve(&mut field, solver, flow, &x_init)?;
    Ok(Samples {
        x: trajectory.terminal().to_vec(),
        codes,
        nfe: field.calls,
        trajectory,
    })
}

/// Perturbs each row to noise level `t` and denoises it under its code:
/// `x' = D(X_t(x, n), t, code)` with `n ~ N(0, I)` from `rng`.
pub fn sde_renoise_step(model: &Model, x: &[f64], t: f64, codes: Option<&[u64]>, rng: &mut Rng) -> Result<Vec<f64>> {
    let dim = model.dim();
    if x.is_empty() || !x.len().is_multiple_of(dim) {
        return Err(Error::ShapeMismatch {
            op: "renoise",
            lhs: alloc::vec![dim],
            rhs: alloc::vec![x.len()],
        });
    }
    let noise = rng::normals(rng, x.len());
    let noisy = model.flow.interpolate(x, &noise, t)?;
    let ts = alloc::vec![t; x.len() / dim];
    model.denoise(&noisy, &ts, codes)
}
