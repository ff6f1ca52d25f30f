use alloc::vec::Vec;

use super::profile::squared_loss_at;
use super::wasserstein2;
use crate::flows::{FiniteDataset, FlowSpec};
use crate::model::VelocityPredictor;
use crate::rng::{self, Rng};
use crate::training::MIN_MC_SAMPLES;
use crate::{Error, Result};

/// Sizes for [`check_theorem_bound`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundConfig {
    /// Codes drawn from the data distribution; their empirical measure
    /// stands in for `P(Y)` on both sides.
    pub conditions: usize,
    /// Simulated and ground-truth points per drawn code.
    pub per_condition: usize,
    /// Independent repetitions used for the error bars.
    pub replicates: usize,
    /// Random pairs probing the one-step map's Lipschitz constant.
    pub probe_pairs: usize,
    /// Euler steps simulating `t_max -> t`.
    pub sim_steps: usize,
    /// Draws for the `l_CFM(t)` estimate per replicate.
    pub loss_samples: usize,
    pub seed: u64,
}

impl BoundConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            conditions: 16,
            per_condition: 32,
            replicates: 4,
            probe_pairs: 10_000,
            sim_steps: 32,
            loss_samples: MIN_MC_SAMPLES,
            seed,
        }
    }
}

/// Both sides of `W(p~_{t-dt}, p_{t-dt}) <= dt l_CFM(t) + L (E_Y W^2(p~_{t,Y}, p_{t,Y}))^(1/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundCheckReport {
    pub t: f64,
    pub dt: f64,
    /// Left-hand Wasserstein distance, averaged over replicates.
    pub lhs: f64,
    pub lhs_se: f64,
    /// `(code, W(p~_{t,y}, p_{t,y}))` for every drawn code of the first replicate.
    pub per_condition: Vec<(u64, f64)>,
    pub l_cfm: f64,
    pub l_cfm_se: f64,
    /// Probe estimate of the one-step map's Lipschitz constant (a lower
    /// bound on the true constant).
    pub lipschitz: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    /// `lhs <= rhs + 3 sqrt(lhs_se^2 + rhs_se^2)`.
    pub pass: bool,
    /// False when some term could not be estimated; `pass` is then false
    /// and carries no verdict.
    pub valid: bool,
    /// Why the report is invalid.
    pub failure: Option<Error>,
}

struct Replicate {
    lhs: f64,
    l_sq: f64,
    l_sq_se: f64,
    per_condition: Vec<(u64, f64)>,
    /// Simulated states at `t`, grouped by drawn code.
    groups: Vec<(Option<u64>, Vec<f64>)>,
}

/// Checks the one-step Wasserstein bound at `(t, dt)` for `predictor`,
/// whose samples at `t` come from Euler simulation from `t_max`, against
/// exact interpolated samples of `data`. With a conditional predictor the
/// dataset must carry the predictor's codes.
pub fn check_theorem_bound(
    predictor: &dyn VelocityPredictor,
    flow: &FlowSpec,
    data: &FiniteDataset,
    t: f64,
    dt: f64,
    cfg: &BoundConfig,
) -> Result<BoundCheckReport> {
    flow.check_time(t)?;
    if !(dt > 0.0) || t - dt < flow.t_min {
        return Err(Error::invalid(alloc::format!("step {dt} invalid at t = {t}")));
    }
    if cfg.per_condition < 32 || cfg.conditions == 0 || cfg.replicates < 2 || cfg.probe_pairs == 0 || cfg.sim_steps == 0
    {
        return Err(Error::invalid(
            "bound check needs >= 32 points per condition and >= 2 replicates",
        ));
    }
    if cfg.conditions * cfg.per_condition > super::EXACT_LIMIT {
        return Err(Error::invalid("pooled sample exceeds the exact Wasserstein limit"));
    }
    if cfg.loss_samples < MIN_MC_SAMPLES {
        return Err(Error::TooFewSamples {
            got: cfg.loss_samples,
            min: MIN_MC_SAMPLES,
        });
    }
    let conditional = predictor.codebook().is_some();
    if conditional && data.codes().is_none() {
        return Err(Error::invalid("conditional bound check needs dataset codes"));
    }

    let mut reps = Vec::with_capacity(cfg.replicates);
    let mut failure = None;
    for r in 0..cfg.replicates {
        match replicate(predictor, flow, data, t, dt, cfg, conditional, r as u64) {
            Ok(rep) => reps.push(rep),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let lipschitz = if failure.is_none() {
        match probe_lipschitz(predictor, t, dt, &reps[0].groups, cfg) {
            Ok(l) => l,
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        }
    } else {
        f64::NAN
    };
    if let Some(e) = failure {
        return Ok(BoundCheckReport {
            t,
            dt,
            lhs: f64::NAN,
            lhs_se: f64::NAN,
            per_condition: Vec::new(),
            l_cfm: f64::NAN,
            l_cfm_se: f64::NAN,
            lipschitz,
            rhs: f64::NAN,
            rhs_se: f64::NAN,
            pass: false,
            valid: false,
            failure: Some(e),
        });
    }

    let lhs: Vec<f64> = reps.iter().map(|r| r.lhs).collect();
    let rhs: Vec<f64> = reps
        .iter()
        .map(|r| {
            let w2 = r.per_condition.iter().map(|(_, w)| w * w).sum::<f64>() / r.per_condition.len() as f64;
            dt * libm::sqrt(r.l_sq) + lipschitz * libm::sqrt(w2)
        })
        .collect();
    let (lhs_mean, lhs_se) = mean_se(&lhs);
    let (rhs_mean, rhs_se) = mean_se(&rhs);
    let l_sq: Vec<f64> = reps.iter().map(|r| r.l_sq).collect();
    let (l_sq_mean, _) = mean_se(&l_sq);
    let l_sq_se = libm::sqrt(reps.iter().map(|r| r.l_sq_se * r.l_sq_se).sum::<f64>()) / reps.len() as f64;
    let l_cfm = libm::sqrt(l_sq_mean);
    let l_cfm_se = if l_cfm > 0.0 { l_sq_se / (2.0 * l_cfm) } else { 0.0 };
    let valid = [lhs_mean, lhs_se, rhs_mean, rhs_se, lipschitz]
        .iter()
        .all(|v| v.is_finite());
    let pass = valid && lhs_mean <= rhs_mean + 3.0 * libm::sqrt(lhs_se * lhs_se + rhs_se * rhs_se);
    Ok(BoundCheckReport {
        t,
        dt,
        lhs: lhs_mean,
        lhs_se,
        per_condition: reps.swap_remove(0).per_condition,
        l_cfm,
        l_cfm_se,
        lipschitz,
        rhs: rhs_mean,
        rhs_se,
        pass,
        valid,
        failure: (!valid).then_some(Error::NonFinite("bound check")),
    })
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, libm::sqrt(var / n))
}

/// Index into `pool` drawn by the dataset's point weights.
fn pick(data: &FiniteDataset, pool: &[usize], r: &mut Rng) -> usize {
    if data.weights().is_none() {
        return pool[rng::index(r, pool.len())];
    }
    let total: f64 = pool.iter().map(|&i| data.weight(i)).sum();
    let u = rng::uniform(r, 0.0, total);
    let mut acc = 0.0;
    for &i in pool {
        acc += data.weight(i);
        if u < acc {
            return i;
        }
    }
    pool[pool.len() - 1]
}

/// `n` exact draws of `X_s` from the points in `pool`.
fn ground_truth(
    flow: &FlowSpec,
    data: &FiniteDataset,
    pool: &[usize],
    s: f64,
    n: usize,
    r: &mut Rng,
) -> Result<Vec<f64>> {
    let dim = data.dim();
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let i = pick(data, pool, r);
        let noise = rng::normals(r, dim);
        out.extend(flow.interpolate(data.point(i), &noise, s)?);
    }
    Ok(out)
}

fn one_step(predictor: &dyn VelocityPredictor, x: &[f64], t: f64, dt: f64, code: Option<u64>) -> Result<Vec<f64>> {
    let rows = x.len() / predictor.dim();
    let ts = alloc::vec![t; rows];
    let codes = code.map(|c| alloc::vec![c; rows]);
    let v = predictor.predict(x, &ts, codes.as_deref())?;
    Ok(x.iter().zip(&v).map(|(a, b)| a - dt * b).collect())
}

#[allow(clippy::too_many_arguments)]
fn replicate(
    predictor: &dyn VelocityPredictor,
    flow: &FlowSpec,
    data: &FiniteDataset,
    t: f64,
    dt: f64,
    cfg: &BoundConfig,
    conditional: bool,
    rep: u64,
) -> Result<Replicate> {
    let dim = data.dim();
    let n = cfg.per_condition;
    let mut r = rng::stream(cfg.seed, rep);
    let all: Vec<usize> = (0..data.len()).collect();

    let mut groups = Vec::with_capacity(cfg.conditions);
    let mut pools = Vec::with_capacity(cfg.conditions);
    for _ in 0..cfg.conditions {
        let i = data.sample_index(&mut r);
        if conditional {
            let code = data.code(i).unwrap_or(0);
            pools.push(data.slice(code)?);
            groups.push(Some(code));
        } else {
            pools.push(all.clone());
            groups.push(None);
        }
    }

    // Simulated p~_{t,y}: Euler from the prior at t_max, code held fixed.
    let h = (flow.t_max - t) / cfg.sim_steps as f64;
    let mut simulated = Vec::with_capacity(cfg.conditions);
    for &code in &groups {
        let mut x = flow.sample_prior(&mut r, n * dim);
        if h > 0.0 {
            for k in 0..cfg.sim_steps {
                let s = flow.t_max - k as f64 * h;
                x = one_step(predictor, &x, s, h, code)?;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bound check simulation"));
        }
        simulated.push(x);
    }

    let mut per_condition = Vec::with_capacity(cfg.conditions);
    let mut advanced = Vec::with_capacity(cfg.conditions * n * dim);
    let mut truth_next = Vec::with_capacity(cfg.conditions * n * dim);
    for ((code, pool), s) in groups.iter().zip(&pools).zip(&simulated) {
        let truth_t = ground_truth(flow, data, pool, t, n, &mut r)?;
        per_condition.push((code.unwrap_or(0), wasserstein2(s, &truth_t, dim)?));
        advanced.extend(one_step(predictor, s, t, dt, *code)?);
        truth_next.extend(ground_truth(flow, data, pool, t - dt, n, &mut r)?);
    }
    let lhs = wasserstein2(&advanced, &truth_next, dim)?;
    let (l_sq, l_sq_se) = squared_loss_at(predictor, flow, data, t, cfg.loss_samples, conditional, &mut r)?;
    Ok(Replicate {
        lhs,
        l_sq,
        l_sq_se,
        per_condition,
        groups: groups.into_iter().zip(simulated).collect(),
    })
}

/// Max of `|d(x) - d(x')| / |x - x'|` over probe pairs sharing a code:
/// half pair two simulated states, half perturb one locally.
fn probe_lipschitz(
    predictor: &dyn VelocityPredictor,
    t: f64,
    dt: f64,
    groups: &[(Option<u64>, Vec<f64>)],
    cfg: &BoundConfig,
) -> Result<f64> {
    let dim = predictor.dim();
    let mut r = rng::stream(cfg.seed, u64::MAX);
    let per_group = cfg.probe_pairs.div_ceil(groups.len());
    let mut best: f64 = 0.0;
    for (code, states) in groups {
        let rows = states.len() / dim;
        let spread = {
            let mean: Vec<f64> = (0..dim)
                .map(|k| states.chunks(dim).map(|p| p[k]).sum::<f64>() / rows as f64)
                .collect();
            let var = states
                .chunks(dim)
                .map(|p| p.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
                .sum::<f64>()
                / rows as f64;
            libm::sqrt(var).max(1e-6)
        };
        let mut a = Vec::with_capacity(per_group * dim);
        let mut b = Vec::with_capacity(per_group * dim);
        for p in 0..per_group {
            let i = rng::index(&mut r, rows);
            let x = &states[i * dim..(i + 1) * dim];
            a.extend_from_slice(x);
            if p % 2 == 0 {
                let j = rng::index(&mut r, rows);
                b.extend_from_slice(&states[j * dim..(j + 1) * dim]);
            } else {
                let eps = 1e-3 * spread;
                b.extend(x.iter().map(|v| v + eps * rng::normal(&mut r)));
            }
        }
        let da = one_step(predictor, &a, t, dt, *code)?;
        let db = one_step(predictor, &b, t, dt, *code)?;
        for p in 0..per_group {
            let c = p * dim..(p + 1) * dim;
            let dx = dist(&a[c.clone()], &b[c.clone()]);
            if dx > 1e-12 {
                best = best.max(dist(&da[c.clone()], &db[c]) / dx);
            }
        }
    }
    if !best.is_finite() {
        return Err(Error::NonFinite("lipschitz probe"));
    }
    Ok(best)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{OracleVelocity, ZeroVelocity};

    fn ring() -> FiniteDataset {
        let pts: Vec<f64> = (0..8)
            .flat_map(|k| {
                let a = k as f64 * core::f64::consts::PI / 4.0;
                [2.0 * libm::cos(a), 2.0 * libm::sin(a)]
            })
            .collect();
        FiniteDataset::new(2, pts).unwrap()
    }

    #[test]
    fn zero_velocity_satisfies_bound() {
        let flow = FlowSpec::rectified();
        let data = ring();
        let rep = check_theorem_bound(&ZeroVelocity { dim: 2 }, &flow, &data, 0.5, 0.1, &BoundConfig::new(1)).unwrap();
        assert!(rep.valid);
        assert!((rep.lipschitz - 1.0).abs() < 1e-9);
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn oracle_small_step_has_small_lhs() {
        let flow = FlowSpec::rectified();
        let data = ring();
        let oracle = OracleVelocity {
            flow,
            data: &data,
            conditional: false,
        };
        let mut cfg = BoundConfig::new(2);
        cfg.probe_pairs = 2000;
        let rep = check_theorem_bound(&oracle, &flow, &data, 0.6, 0.01, &cfg).unwrap();
        assert!(rep.valid && rep.pass, "{rep:?}");
    }

    #[test]
    fn invalid_inputs() {
        let flow = FlowSpec::rectified();
        let data = ring();
        let z = ZeroVelocity { dim: 2 };
        let cfg = BoundConfig::new(0);
        assert!(check_theorem_bound(&z, &flow, &data, 0.5, 0.0, &cfg).is_err());
        assert!(check_theorem_bound(&z, &flow, &data, 0.5, 0.6, &cfg).is_err());
        let mut small = cfg;
        small.per_condition = 8;
        assert!(check_theorem_bound(&z, &flow, &data, 0.5, 0.1, &small).is_err());
    }
}
