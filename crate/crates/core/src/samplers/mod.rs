//! Backward simulation: time grids, velocity fields, Euler/Heun/RK45/iPNDM
//! solvers, conditional sampling and the renoising step used by editing.

mod conditional;
mod solvers;

pub use conditional::{conditional_sample, sde_renoise_step, Samples};
pub use solvers::{euler_solve, heun_solve, heun_solve_with, ipndm_solve, rk45_solve, solve, Rk45Config, SolverConfig};

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::flows::{FlowFamily, FlowSpec};
use crate::model::VelocityPredictor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    /// `t_i = (t_max^(1/rho) + i/(N-1) (t_min^(1/rho) - t_max^(1/rho)))^rho`.
    Polynomial {
        rho: f64,
    },
    Uniform,
}

/// A strictly decreasing grid of `n` times from `t_max` to `t_min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeSchedule {
    pub kind: ScheduleKind,
    pub n: usize,
    pub t_min: f64,
    pub t_max: f64,
}

impl TimeSchedule {
    pub fn polynomial(n: usize, t_min: f64, t_max: f64, rho: f64) -> Self {
        Self {
            kind: ScheduleKind::Polynomial { rho },
            n,
            t_min,
            t_max,
        }
    }

    pub fn uniform(n: usize, t_min: f64, t_max: f64) -> Self {
        Self {
            kind: ScheduleKind::Uniform,
            n,
            t_min,
            t_max,
        }
    }

    /// Polynomial (`rho = 7`) for the EDM and VE flows, uniform otherwise,
    /// from `t_max` down to the flow's sampling floor.
    pub fn for_flow(flow: &FlowSpec, n: usize) -> Self {
        match flow.family {
            FlowFamily::LinearEdm | FlowFamily::Ve => Self::polynomial(n, flow.sample_floor, flow.t_max, 7.0),
            FlowFamily::RectifiedFlow | FlowFamily::Vp => Self::uniform(n, flow.sample_floor, flow.t_max),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n >= 2
            && self.t_min >= 0.0
            && self.t_min < self.t_max
            && self.t_max.is_finite()
            && match self.kind {
                ScheduleKind::Polynomial { rho } => rho > 0.0 && rho.is_finite(),
                ScheduleKind::Uniform => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(alloc::format!("invalid time schedule {self:?}")))
        }
    }

    pub fn times(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let last = (self.n - 1) as f64;
        let mut out: Vec<f64> = (0..self.n)
            .map(|i| {
                let f = i as f64 / last;
                match self.kind {
                    ScheduleKind::Polynomial { rho } => {
                        let a = libm::pow(self.t_max, 1.0 / rho);
                        let b = libm::pow(self.t_min, 1.0 / rho);
                        libm::pow(a + f * (b - a), rho)
                    }
                    ScheduleKind::Uniform => self.t_max + f * (self.t_min - self.t_max),
                }
            })
            .collect();
        // Pin the endpoints against pow round-off.
        out[0] = self.t_max;
        out[self.n - 1] = self.t_min;
        if out.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::invalid("time schedule is not strictly decreasing"));
        }
        Ok(out)
    }
}

/// A batched velocity field: `x` holds row-major states, all at time `t`.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn eval(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl<F: VelocityField + ?Sized> VelocityField for &mut F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).eval(x, t)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Box<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).eval(x, t)
    }
}

/// A field from a closure.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: FnMut(&[f64], f64) -> Vec<f64>> VelocityField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok((self.f)(x, t))
    }
}

/// A predictor's velocity with each row's code held fixed.
pub struct PredictorField<'a> {
    pub predictor: &'a dyn VelocityPredictor,
    pub codes: Option<Vec<u64>>,
}

impl VelocityField for PredictorField<'_> {
    fn dim(&self) -> usize {
        self.predictor.dim()
    }

    fn eval(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let rows = x.len() / self.predictor.dim();
        let ts = alloc::vec![t; rows];
        self.predictor.predict(x, &ts, self.codes.as_deref())
    }
}

/// Counts calls to the wrapped field.
pub struct Counting<F> {
    pub inner: F,
    pub calls: u64,
}

impl<F> Counting<F> {
    pub fn new(inner: F) -> Self {
        Self { inner, calls: 0 }
    }
}

impl<F: VelocityField> VelocityField for Counting<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.calls += 1;
        self.inner.eval(x, t)
    }
}

/// States along a backward simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    /// One row-major batch per grid point; `states[0]` is the initial draw.
    pub states: Vec<Vec<f64>>,
    /// Velocity evaluated at each grid point's state, where one was.
    pub velocities: Vec<Option<Vec<f64>>>,
    /// Field evaluations performed.
    pub nfe: u64,
}

impl TrajectoryRecord {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// The trajectory of batch row `row`, as a single-row record.
    pub fn row(&self, row: usize, dim: usize) -> TrajectoryRecord {
        let pick = |v: &Vec<f64>| v[row * dim..(row + 1) * dim].to_vec();
        TrajectoryRecord {
            times: self.times.clone(),
            states: self.states.iter().map(pick).collect(),
            velocities: self.velocities.iter().map(|v| v.as_ref().map(pick)).collect(),
            nfe: self.nfe,
        }
    }
}
