use alloc::vec;
use alloc::vec::Vec;

use super::{TimeSchedule, TrajectoryRecord, VelocityField};
use crate::flows::FlowSpec;
use crate::{Error, Result};

fn check_init(field: &impl VelocityField, x: &[f64]) -> Result<()> {
    let dim = field.dim();
    if dim == 0 || x.is_empty() || !x.len().is_multiple_of(dim) {
        return Err(Error::ShapeMismatch {
            op: "solve",
            lhs: vec![dim],
            rhs: vec![x.len()],
        });
    }
    Ok(())
}

fn checked(x: Vec<f64>, step: usize) -> Result<Vec<f64>> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::NonFiniteState { step })
    }
}

fn eval(field: &mut impl VelocityField, x: &[f64], t: f64, nfe: &mut u64) -> Result<Vec<f64>> {
    *nfe += 1;
    let v = field.eval(x, t)?;
    if v.len() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "velocity field",
            lhs: vec![x.len()],
            rhs: vec![v.len()],
        });
    }
    Ok(v)
}

/// `x_{i+1} = x_i + (t_{i+1} - t_i) v(x_i, t_i)`; `N - 1` evaluations.
pub fn euler_solve(mut field: impl VelocityField, schedule: &TimeSchedule, x_init: &[f64]) -> Result<TrajectoryRecord> {
    check_init(&field, x_init)?;
    let times = schedule.times()?;
    let mut nfe = 0;
    let mut states = vec![x_init.to_vec()];
    let mut velocities = Vec::with_capacity(times.len());
    let mut x = x_init.to_vec();
    for i in 0..times.len() - 1 {
        let h = times[i + 1] - times[i];
        let v = eval(&mut field, &x, times[i], &mut nfe)?;
        x = checked(x.iter().zip(&v).map(|(&xv, &vv)| xv + h * vv).collect(), i)?;
        velocities.push(Some(v));
        states.push(x.clone());
    }
    velocities.push(None);
    Ok(TrajectoryRecord {
        times,
        states,
        velocities,
        nfe,
    })
}

/// Heun's method without a corrector on the last step: `2(N - 1) - 1`
/// evaluations.
pub fn heun_solve(field: impl VelocityField, schedule: &TimeSchedule, x_init: &[f64]) -> Result<TrajectoryRecord> {
    heun_solve_with(field, schedule, x_init, false)
}

/// Heun's method; `final_corrector` also corrects the last step
/// (`2(N - 1)` evaluations).
pub fn heun_solve_with(
    mut field: impl VelocityField,
    schedule: &TimeSchedule,
    x_init: &[f64],
    final_corrector: bool,
) -> Result<TrajectoryRecord> {
    check_init(&field, x_init)?;
    let times = schedule.times()?;
    let last = times.len() - 2;
    let mut nfe = 0;
    let mut states = vec![x_init.to_vec()];
    let mut velocities = Vec::with_capacity(times.len());
    let mut x = x_init.to_vec();
    for i in 0..=last {
        let h = times[i + 1] - times[i];
        let v = eval(&mut field, &x, times[i], &mut nfe)?;
        let pred: Vec<f64> = x.iter().zip(&v).map(|(&xv, &vv)| xv + h * vv).collect();
        x = if i < last || final_corrector {
            let pred = checked(pred, i)?;
            let v2 = eval(&mut field, &pred, times[i + 1], &mut nfe)?;
            x.iter()
                .zip(v.iter().zip(&v2))
                .map(|(&xv, (&a, &b))| xv + h * (0.5 * a + 0.5 * b))
                .collect()
        } else {
            pred
        };
        x = checked(x, i)?;
        velocities.push(Some(v));
        states.push(x.clone());
    }
    velocities.push(None);
    Ok(TrajectoryRecord {
        times,
        states,
        velocities,
        nfe,
    })
}

/// Adams-Bashforth style coefficients of iPNDM, newest velocity first.
const IPNDM: [&[f64]; 4] = [
    &[1.0],
    &[3.0 / 2.0, -1.0 / 2.0],
    &[23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0],
    &[55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0],
];

/// Pseudo linear multistep solver of order `order` (1 to 4), warm-started
/// at lower orders. With `afs`, the first velocity is the flow's analytic
/// prior velocity and costs no evaluation.
pub fn ipndm_solve(
    mut field: impl VelocityField,
    schedule: &TimeSchedule,
    x_init: &[f64],
    order: usize,
    afs: Option<&FlowSpec>,
) -> Result<TrajectoryRecord> {
    if !(1..=4).contains(&order) {
        return Err(Error::invalid(alloc::format!("iPNDM order {order} not in 1..=4")));
    }
    check_init(&field, x_init)?;
    let times = schedule.times()?;
    let mut nfe = 0;
    let mut states = vec![x_init.to_vec()];
    let mut velocities = Vec::with_capacity(times.len());
    let mut history: Vec<Vec<f64>> = Vec::with_capacity(order);
    let mut x = x_init.to_vec();
    for i in 0..times.len() - 1 {
        let h = times[i + 1] - times[i];
        let v = match (i, afs) {
            (0, Some(flow)) => flow.prior_velocity(&x, times[0])?,
            _ => eval(&mut field, &x, times[i], &mut nfe)?,
        };
        if history.len() == order {
            history.pop();
        }
        history.insert(0, v.clone());
        let coeffs = IPNDM[history.len() - 1];
        let mut combo: Vec<f64> = history[0].iter().map(|&a| coeffs[0] * a).collect();
        for (c, past) in coeffs.iter().zip(&history).skip(1) {
            for (acc, &p) in combo.iter_mut().zip(past) {
                *acc += c * p;
            }
        }
        x = checked(x.iter().zip(&combo).map(|(&xv, &d)| xv + h * d).collect(), i)?;
        velocities.push(Some(v));
        states.push(x.clone());
    }
    velocities.push(None);
    Ok(TrajectoryRecord {
        times,
        states,
        velocities,
        nfe,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rk45Config {
    pub t_start: f64,
    pub t_end: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Rk45Config {
    /// From `t_max` down to the flow's sampling floor.
    pub fn for_flow(flow: &FlowSpec, rtol: f64) -> Self {
        Self {
            t_start: flow.t_max,
            t_end: flow.sample_floor,
            rtol,
            atol: rtol,
            max_steps: 100_000,
        }
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand-Prince integration from `t_start` to `t_end`. The first
/// trial step spans the whole interval; the controller shrinks it as needed.
/// Records every accepted step.
pub fn rk45_solve(mut field: impl VelocityField, x_init: &[f64], config: &Rk45Config) -> Result<TrajectoryRecord> {
    check_init(&field, x_init)?;
    if !(config.rtol > 0.0 && config.atol > 0.0) || config.t_start == config.t_end {
        return Err(Error::invalid("RK45 needs positive tolerances and a nonempty interval"));
    }
    let (t0, t1) = (config.t_start, config.t_end);
    let dir = if t1 < t0 { -1.0 } else { 1.0 };
    let mut nfe = 0;
    let mut t = t0;
    let mut x = x_init.to_vec();
    let mut k1 = eval(&mut field, &x, t, &mut nfe)?;
    let mut h = t1 - t0;
    let mut times = vec![t0];
    let mut states = vec![x.clone()];
    let mut velocities = Vec::new();
    let n = x.len();
    let mut steps = 0;
    while (t1 - t) * dir > 0.0 {
        steps += 1;
        if steps > config.max_steps {
            return Err(Error::StepSizeUnderflow { t, h });
        }
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }
        if h.abs() < 1e-14 * t.abs().max(1.0) {
            return Err(Error::StepSizeUnderflow { t, h });
        }
        let mut k: Vec<Vec<f64>> = vec![k1.clone()];
        let mut stage = vec![0.0; n];
        for s in 1..7 {
            for j in 0..n {
                let mut acc = 0.0;
                for (a, kk) in A[s].iter().zip(&k) {
                    acc += a * kk[j];
                }
                stage[j] = x[j] + h * acc;
            }
            let ts = if s == 6 { t + h } else { t + C[s] * h };
            let ks = eval(&mut field, &stage, ts, &mut nfe)?;
            k.push(ks);
        }
        // The 7th stage point is the 5th-order solution.
        let x_new = stage.clone();
        let mut err_sq = 0.0;
        for j in 0..n {
            let mut e = 0.0;
            for s in 0..7 {
                let b5 = if s < 6 { A[6][s] } else { 0.0 };
                e += (b5 - B4[s]) * k[s][j];
            }
            let scale = config.atol + config.rtol * x[j].abs().max(x_new[j].abs());
            err_sq += (h * e / scale) * (h * e / scale);
        }
        let err = libm::sqrt(err_sq / n as f64);
        if !err.is_finite() {
            return Err(Error::NonFiniteState { step: times.len() - 1 });
        }
        if err <= 1.0 {
            velocities.push(Some(k1));
            // `t + h` can miss `t1` by round-off when `h = t1 - t`.
            t = if h == t1 - t || (t + h - t1) * dir >= 0.0 {
                t1
            } else {
                t + h
            };
            x = x_new;
            k1 = k.swap_remove(6);
            times.push(t);
            states.push(x.clone());
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * libm::pow(err, -0.2)).clamp(0.2, 5.0)
        };
        h *= if err <= 1.0 { factor } else { factor.min(1.0) };
    }
    velocities.push(Some(k1));
    Ok(TrajectoryRecord {
        times,
        states,
        velocities,
        nfe,
    })
}

/// A solver and its grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SolverConfig {
    Euler(TimeSchedule),
    /// `final_corrector` also corrects the last step.
    Heun {
        schedule: TimeSchedule,
        final_corrector: bool,
    },
    Rk45(Rk45Config),
    Ipndm {
        schedule: TimeSchedule,
        order: usize,
        afs: bool,
    },
}

impl SolverConfig {
    /// The fixed-step solver `name` (`euler`, `heun`, `ipndm`, `ipndm-afs`)
    /// with a grid sized so it performs exactly `nfe` evaluations.
    pub fn with_nfe(name: &str, nfe: usize, flow: &FlowSpec) -> Result<Self> {
        if nfe == 0 {
            return Err(Error::invalid("NFE must be positive"));
        }
        let grid = |n: usize| TimeSchedule::for_flow(flow, n);
        match name {
            "euler" => Ok(SolverConfig::Euler(grid(nfe + 1))),
            // Odd counts skip the last corrector; even ones keep it.
            "heun" => Ok(SolverConfig::Heun {
                schedule: grid(nfe.div_ceil(2) + 1),
                final_corrector: nfe.is_multiple_of(2),
            }),
            "ipndm" => Ok(SolverConfig::Ipndm {
                schedule: grid(nfe + 1),
                order: 4,
                afs: false,
            }),
            "ipndm-afs" => Ok(SolverConfig::Ipndm {
                schedule: grid(nfe + 2),
                order: 4,
                afs: true,
            }),
            other => Err(Error::invalid(alloc::format!("unknown solver {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SolverConfig::Euler(_) => "euler",
            SolverConfig::Heun { .. } => "heun",
            SolverConfig::Rk45(_) => "rk45",
            SolverConfig::Ipndm { afs: false, .. } => "ipndm",
            SolverConfig::Ipndm { afs: true, .. } => "ipndm-afs",
        }
    }
}

/// Runs `config` on `field`; `flow` supplies the analytic first step.
pub fn solve(
    field: impl VelocityField,
    config: &SolverConfig,
    flow: &FlowSpec,
    x_init: &[f64],
) -> Result<TrajectoryRecord> {
    match config {
        SolverConfig::Euler(s) => euler_solve(field, s, x_init),
        SolverConfig::Heun {
            schedule,
            final_corrector,
        } => heun_solve_with(field, schedule, x_init, *final_corrector),
        SolverConfig::Rk45(c) => rk45_solve(field, x_init, c),
        SolverConfig::Ipndm { schedule, order, afs } => {
            ipndm_solve(field, schedule, x_init, *order, afs.then_some(flow))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Counting, FnField};
    use super::*;

    fn constant(c: f64) -> FnField<impl FnMut(&[f64], f64) -> Vec<f64>> {
        FnField {
            dim: 1,
            f: move |x: &[f64], _t: f64| vec![c; x.len()],
        }
    }

    #[test]
    fn constant_field_is_exact_in_one_step() {
        let s = TimeSchedule::uniform(2, 0.25, 1.0);
        let x0 = [0.5, -1.0];
        let want: Vec<f64> = x0.iter().map(|x| x + (0.25 - 1.0) * 2.0).collect();
        assert_eq!(euler_solve(constant(2.0), &s, &x0).unwrap().terminal(), &want[..]);
        assert_eq!(heun_solve(constant(2.0), &s, &x0).unwrap().terminal(), &want[..]);
        for order in 1..=4 {
            assert_eq!(
                ipndm_solve(constant(2.0), &s, &x0, order, None).unwrap().terminal(),
                &want[..]
            );
        }
        let rk = rk45_solve(
            constant(2.0),
            &x0,
            &Rk45Config {
                t_start: 1.0,
                t_end: 0.25,
                rtol: 1e-6,
                atol: 1e-6,
                max_steps: 100,
            },
        )
        .unwrap();
        assert_eq!(rk.times.len(), 2);
        for (a, b) in rk.terminal().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_field_keeps_state() {
        let s = TimeSchedule::polynomial(6, 0.002, 80.0, 7.0);
        let x0 = [1.0, 2.0, 3.0];
        assert_eq!(euler_solve(constant(0.0), &s, &x0).unwrap().terminal(), &x0);
    }

    #[test]
    fn nfe_accounting() {
        let s = TimeSchedule::uniform(5, 0.1, 1.0);
        let mut f = Counting::new(constant(1.0));
        assert_eq!(euler_solve(&mut f, &s, &[0.0]).unwrap().nfe, 4);
        assert_eq!(f.calls, 4);
        let mut f = Counting::new(constant(1.0));
        assert_eq!(heun_solve(&mut f, &s, &[0.0]).unwrap().nfe, 7);
        assert_eq!(f.calls, 7);
        let mut f = Counting::new(constant(1.0));
        let flow = FlowSpec::rectified();
        assert_eq!(ipndm_solve(&mut f, &s, &[0.0], 4, Some(&flow)).unwrap().nfe, 3);
        assert_eq!(f.calls, 3);
    }

    #[test]
    fn heun_with_final_corrector_integrates_t_exactly() {
        let s = TimeSchedule::uniform(4, 0.0, 1.0);
        let field = FnField {
            dim: 1,
            f: |x: &[f64], t: f64| vec![t; x.len()],
        };
        let r = heun_solve_with(field, &s, &[0.0], true).unwrap();
        // x(0) = x(1) + int_1^0 t dt = -1/2
        assert!((r.terminal()[0] + 0.5).abs() < 1e-15);
        assert_eq!(r.nfe, 6);
    }

    #[test]
    fn rk45_exponential() {
        let field = FnField {
            dim: 1,
            f: |x: &[f64], _t: f64| x.iter().map(|v| -v).collect(),
        };
        let rtol = 1e-8;
        let r = rk45_solve(
            field,
            &[1.0],
            &Rk45Config {
                t_start: 1.0,
                t_end: 0.0,
                rtol,
                atol: rtol,
                max_steps: 10_000,
            },
        )
        .unwrap();
        let e = core::f64::consts::E;
        assert!((r.terminal()[0] - e).abs() < 10.0 * rtol * e);
    }

    #[test]
    fn ipndm_order_one_is_euler_bitwise() {
        let s = TimeSchedule::polynomial(9, 0.002, 80.0, 7.0);
        let f = || FnField {
            dim: 2,
            f: |x: &[f64], t: f64| x.iter().map(|v| libm::sin(v * t) - 0.1 * v).collect(),
        };
        let x0 = [0.3, -1.7, 2.2, 0.01];
        let a = euler_solve(f(), &s, &x0).unwrap();
        let b = ipndm_solve(f(), &s, &x0, 1, None).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn non_finite_state_names_step() {
        let s = TimeSchedule::uniform(4, 0.0, 1.0);
        let field = FnField {
            dim: 1,
            f: |x: &[f64], t: f64| vec![if t < 0.5 { f64::INFINITY } else { 0.0 }; x.len()],
        };
        assert_eq!(
            euler_solve(field, &s, &[0.0]).unwrap_err(),
            Error::NonFiniteState { step: 2 }
        );
    }

    #[test]
    fn with_nfe_grids() {
        let flow = FlowSpec::edm();
        for (name, nfe) in [
            ("euler", 4),
            ("heun", 5),
            ("heun", 4),
            ("heun", 2),
            ("ipndm", 4),
            ("ipndm-afs", 4),
        ] {
            let cfg = SolverConfig::with_nfe(name, nfe, &flow).unwrap();
            let mut f = Counting::new(constant(0.0));
            let r = solve(&mut f, &cfg, &flow, &[1.0]).unwrap();
            assert_eq!(r.nfe as usize, nfe, "{name}");
            assert_eq!(f.calls as usize, nfe, "{name}");
            assert_eq!(cfg.name(), name);
        }
        assert!(SolverConfig::with_nfe("heun", 0, &flow).is_err());
        assert!(SolverConfig::with_nfe("midpoint", 4, &flow).is_err());
    }
}
