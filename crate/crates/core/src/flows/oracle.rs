//! Exact posterior velocities `E[dX_t/dt | X_t = x]` over finite datasets.
//!
//! Given `X_0 = x_i`, `X_t` is Gaussian with mean `a x_i` and covariance
//! `s^2 I`, and the per-point velocity is
//! `u_i = a' x_i + s' (x - a x_i) / s`. The posterior weights
//! `p_i N(x; a x_i, s^2 I)` are normalized with log-sum-exp.

use alloc::vec;
use alloc::vec::Vec;

use super::{Coefficients, FiniteDataset, FlowSpec};
use crate::{Error, Result};

fn checked_coefficients(flow: &FlowSpec, t: f64) -> Result<Coefficients> {
    flow.check_time(t)?;
    let floor = flow.oracle_floor();
    if t < floor || t <= flow.t_min {
        return Err(Error::BelowTimeFloor { t, floor });
    }
    flow.coefficients(t)
}

fn check_dim(data: &FiniteDataset, x: &[f64]) -> Result<()> {
    if x.len() == data.dim() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: "oracle",
            lhs: vec![data.dim()],
            rhs: vec![x.len()],
        })
    }
}

/// Normalized posterior weights over `indices`, in the same order.
fn posterior_weights(c: &Coefficients, data: &FiniteDataset, indices: &[usize], x: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (2.0 * c.s * c.s);
    let mut logw: Vec<f64> = indices
        .iter()
        .map(|&i| {
            let d2: f64 = data
                .point(i)
                .iter()
                .zip(x)
                .map(|(&p, &xv)| {
                    let r = xv - c.a * p;
                    r * r
                })
                .sum();
            libm::log(data.weight(i)) - d2 * inv
        })
        .collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for lw in logw.iter_mut() {
        *lw = libm::exp(*lw - max);
        total += *lw;
    }
    logw.iter_mut().for_each(|w| *w /= total);
    logw
}

#[inline]
fn point_velocity(c: &Coefficients, p: &[f64], x: &[f64], out: &mut [f64]) {
    for ((o, &pv), &xv) in out.iter_mut().zip(p).zip(x) {
        *o = c.da * pv + c.ds * (xv - c.a * pv) / c.s;
    }
}

fn posterior_over(flow: &FlowSpec, data: &FiniteDataset, indices: &[usize], x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(data, x)?;
    let c = checked_coefficients(flow, t)?;
    let w = posterior_weights(&c, data, indices, x);
    let mut v = vec![0.0; x.len()];
    let mut u = vec![0.0; x.len()];
    for (&i, wi) in indices.iter().zip(&w) {
        point_velocity(&c, data.point(i), x, &mut u);
        for (vv, uu) in v.iter_mut().zip(&u) {
            *vv += wi * uu;
        }
    }
    Ok(v)
}

/// `E[dX_t/dt | X_t = x]` under the dataset's empirical distribution.
pub fn oracle_velocity(flow: &FlowSpec, data: &FiniteDataset, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..data.len()).collect();
    posterior_over(flow, data, &all, x, t)
}

/// Like [`oracle_velocity`] with the posterior restricted to points whose
/// code equals `code`.
pub fn oracle_velocity_conditional(
    flow: &FlowSpec,
    data: &FiniteDataset,
    x: &[f64],
    t: f64,
    code: u64,
) -> Result<Vec<f64>> {
    let slice = data.slice(code)?;
    posterior_over(flow, data, &slice, x, t)
}

/// Posterior variance of the per-point velocity at `(x, t)`:
/// `E[|dX_t/dt - E[dX_t/dt | X_t, Y]|^2 | X_t = x]`.
///
/// With `by_code` the inner expectation also conditions on the point's code
/// (the within-code spread); otherwise on `X_t` alone. Averaging this over
/// `X_t` gives the intersection term with less variance than the
/// per-sample estimator, and refining a partition can only lower it.
pub fn posterior_spread(flow: &FlowSpec, data: &FiniteDataset, x: &[f64], t: f64, by_code: bool) -> Result<f64> {
    check_dim(data, x)?;
    let c = checked_coefficients(flow, t)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let w = posterior_weights(&c, data, &all, x);
    let dim = x.len();
    let groups: Vec<u64> = match (by_code, data.codes()) {
        (true, Some(codes)) => codes.to_vec(),
        (true, None) => return Err(Error::invalid("dataset has no condition codes")),
        (false, _) => vec![0; data.len()],
    };
    // Group-wise mass, first and second moments of u.
    let mut keys: Vec<u64> = groups.clone();
    keys.sort_unstable();
    keys.dedup();
    let mut mass = vec![0.0; keys.len()];
    let mut first = vec![0.0; keys.len() * dim];
    let mut second = vec![0.0; keys.len()];
    let mut u = vec![0.0; dim];
    for i in 0..data.len() {
        let g = keys.binary_search(&groups[i]).unwrap_or(0);
        point_velocity(&c, data.point(i), x, &mut u);
        mass[g] += w[i];
        for (f, uu) in first[g * dim..(g + 1) * dim].iter_mut().zip(&u) {
            *f += w[i] * uu;
        }
        second[g] += w[i] * u.iter().map(|v| v * v).sum::<f64>();
    }
    let mut spread = 0.0;
    for g in 0..keys.len() {
        if mass[g] <= 0.0 {
            continue;
        }
        let mean_sq: f64 = first[g * dim..(g + 1) * dim].iter().map(|f| f * f).sum::<f64>() / mass[g];
        spread += (second[g] - mean_sq).max(0.0);
    }
    Ok(spread)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use alloc::vec::Vec;

    fn ring(k: usize, radius: f64) -> FiniteDataset {
        let pts: Vec<f64> = (0..k)
            .flat_map(|i| {
                let a = 2.0 * core::f64::consts::PI * i as f64 / k as f64;
                [radius * libm::cos(a), radius * libm::sin(a)]
            })
            .collect();
        FiniteDataset::new(2, pts).unwrap()
    }

    /// Unnormalized direct summation, no log-sum-exp.
    fn direct_sum(flow: &FlowSpec, data: &FiniteDataset, idx: &[usize], x: &[f64], t: f64) -> Vec<f64> {
        let c = flow.coefficients(t).unwrap();
        let mut num = vec![0.0; x.len()];
        let mut den = 0.0;
        for &i in idx {
            let p = data.point(i);
            let d2: f64 = p.iter().zip(x).map(|(&pv, &xv)| (xv - c.a * pv).powi(2)).sum();
            let g = data.weight(i) * libm::exp(-d2 / (2.0 * c.s * c.s));
            den += g;
            for k in 0..x.len() {
                let noise = (x[k] - c.a * p[k]) / c.s;
                num[k] += g * (c.da * p[k] + c.ds * noise);
            }
        }
        num.iter().map(|n| n / den).collect()
    }

    #[test]
    fn single_point_oracle_is_the_implied_velocity() {
        let flow = FlowSpec::rectified();
        let data = FiniteDataset::new(2, vec![0.5, -1.0]).unwrap();
        let x = [1.3, 0.2];
        let t = 0.4;
        let v = oracle_velocity(&flow, &data, &x, t).unwrap();
        let expected = [(x[0] - 0.5) / t, (x[1] + 1.0) / t];
        for k in 0..2 {
            assert!((v[k] - expected[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_pair_has_no_data_directed_component() {
        let flow = FlowSpec::rectified();
        let data = FiniteDataset::new(1, vec![-2.0, 2.0]).unwrap();
        let v = oracle_velocity(&flow, &data, &[0.0], 0.5).unwrap();
        assert!(v[0].abs() < 1e-15);
    }

    #[test]
    fn ring_matches_direct_summation() {
        let data = ring(8, 2.0);
        let mut r = rng::seeded(11);
        for flow in [FlowSpec::rectified(), FlowSpec::vp(), FlowSpec::edm(), FlowSpec::ve()] {
            let t = 0.5 * flow.t_max;
            let all: Vec<usize> = (0..8).collect();
            for _ in 0..20 {
                let x = [rng::normal(&mut r), rng::normal(&mut r)];
                let got = oracle_velocity(&flow, &data, &x, t).unwrap();
                let want = direct_sum(&flow, &data, &all, &x, t);
                for k in 0..2 {
                    let rel = (got[k] - want[k]).abs() / want[k].abs().max(1e-300);
                    assert!(rel < 1e-10 || (got[k] - want[k]).abs() < 1e-13, "{got:?} vs {want:?}");
                }
            }
        }
    }

    #[test]
    fn conditional_oracle_cases() {
        let flow = FlowSpec::rectified();
        let base = ring(16, 2.0);
        let x = [0.4, -0.3];
        let t = 0.6;

        let same = base.clone().with_codes(vec![5; 16]).unwrap();
        assert_eq!(
            oracle_velocity_conditional(&flow, &same, &x, t, 5).unwrap(),
            oracle_velocity(&flow, &base, &x, t).unwrap()
        );

        let own = base.clone().with_codes((0..16).collect()).unwrap();
        let single = FiniteDataset::new(2, base.point(3).to_vec()).unwrap();
        let a = oracle_velocity_conditional(&flow, &own, &x, t, 3).unwrap();
        let b = oracle_velocity(&flow, &single, &x, t).unwrap();
        for k in 0..2 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }

        let mut r = rng::seeded(3);
        let codes: Vec<u64> = (0..16).map(|_| rng::index(&mut r, 4) as u64).collect();
        let part = base.clone().with_codes(codes.clone()).unwrap();
        for code in 0..4u64 {
            let idx: Vec<usize> = (0..16).filter(|&i| codes[i] == code).collect();
            if idx.is_empty() {
                continue;
            }
            let got = oracle_velocity_conditional(&flow, &part, &x, t, code).unwrap();
            let want = direct_sum(&flow, &part, &idx, &x, t);
            for k in 0..2 {
                assert!((got[k] - want[k]).abs() <= 1e-10 * want[k].abs().max(1e-3));
            }
        }
        assert_eq!(
            oracle_velocity_conditional(&flow, &part, &x, t, 99).unwrap_err(),
            Error::EmptyCodeSlice(99)
        );
    }

    #[test]
    fn oracle_refuses_times_below_floor() {
        let flow = FlowSpec::edm();
        let data = ring(4, 1.0);
        assert!(matches!(
            oracle_velocity(&flow, &data, &[0.0, 0.0], 0.01),
            Err(Error::BelowTimeFloor { .. })
        ));
        assert!(oracle_velocity(&flow, &data, &[0.0, 0.0], 0.08).is_ok());
    }

    #[test]
    fn spread_is_zero_for_one_point_and_shrinks_with_codes() {
        let flow = FlowSpec::rectified();
        let one = FiniteDataset::new(2, vec![1.0, 1.0]).unwrap();
        assert!(posterior_spread(&flow, &one, &[0.3, 0.1], 0.5, false).unwrap().abs() < 1e-12);

        let data = ring(8, 2.0).with_codes(vec![0, 0, 1, 1, 2, 2, 3, 3]).unwrap();
        let x = [0.1, 0.2];
        let coarse = posterior_spread(&flow, &data, &x, 0.7, false).unwrap();
        let fine = posterior_spread(&flow, &data, &x, 0.7, true).unwrap();
        assert!(fine < coarse);
    }
}
