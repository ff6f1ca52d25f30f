//! Forward flows `X_t = a(t) X_0 + s(t) eps` and their exact oracles.
//!
//! All four families interpolate a datum `X_0` and standard normal noise
//! `eps` with scalar coefficients, so one [`Coefficients`] struct drives
//! interpolation, the analytic time derivative and the Gaussian posterior
//! used by the oracles:
//!
//! | family          | a(t)        | s(t)        | interval    |
//! |-----------------|-------------|-------------|-------------|
//! | VP              | cos(pi t/2) | sin(pi t/2) | [0, 1]      |
//! | VE              | 1           | sqrt(t)     | [0, 6400]   |
//! | linear (EDM)    | 1           | t           | [0, 80]     |
//! | rectified flow  | 1 - t       | t           | [0, 1]      |
//!
//! For VP, `sin(pi t/2) = sqrt(1 - cos(pi t/2)^2)` on `[0, 1]`.

mod dataset;
mod oracle;

pub use dataset::FiniteDataset;
pub use oracle::{oracle_velocity, oracle_velocity_conditional, posterior_spread};

use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlowFamily {
    Vp,
    Ve,
    LinearEdm,
    RectifiedFlow,
}

impl FlowFamily {
    pub fn name(self) -> &'static str {
        match self {
            FlowFamily::Vp => "vp",
            FlowFamily::Ve => "ve",
            FlowFamily::LinearEdm => "edm",
            FlowFamily::RectifiedFlow => "rf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vp" => Some(FlowFamily::Vp),
            "ve" => Some(FlowFamily::Ve),
            "edm" => Some(FlowFamily::LinearEdm),
            "rf" => Some(FlowFamily::RectifiedFlow),
            _ => None,
        }
    }
}

/// `a(t)`, `a'(t)`, `s(t)`, `s'(t)` at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub a: f64,
    pub da: f64,
    pub s: f64,
    pub ds: f64,
}

/// A forward-flow family on `[t_min, t_max]` plus its sampling floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSpec {
    pub family: FlowFamily,
    pub t_min: f64,
    pub t_max: f64,
    /// Terminal time of backward simulation; solvers stop here instead of at
    /// `t_min`, where denoiser-parameterized velocities are undefined.
    pub sample_floor: f64,
    /// Data standard deviation used by EDM preconditioning.
    pub sigma_data: f64,
}

impl FlowSpec {
    pub fn rectified() -> Self {
        Self {
            family: FlowFamily::RectifiedFlow,
            t_min: 0.0,
            t_max: 1.0,
            sample_floor: 1e-3,
            sigma_data: 0.5,
        }
    }

    pub fn vp() -> Self {
        Self {
            family: FlowFamily::Vp,
            t_min: 0.0,
            t_max: 1.0,
            sample_floor: 1e-3,
            sigma_data: 0.5,
        }
    }

    /// `X_t = X_0 + t eps` on `[0, 80]`, floor 0.002, `sigma_data = 0.5`.
    pub fn edm() -> Self {
        Self {
            family: FlowFamily::LinearEdm,
            t_min: 0.0,
            t_max: 80.0,
            sample_floor: 0.002,
            sigma_data: 0.5,
        }
    }

    /// `X_t = X_0 + sqrt(t) eps`; `t` is a variance, so `[0, 6400]` matches
    /// the EDM noise range.
    pub fn ve() -> Self {
        Self {
            family: FlowFamily::Ve,
            t_min: 0.0,
            t_max: 6400.0,
            sample_floor: 4e-6,
            sigma_data: 0.5,
        }
    }

    pub fn for_family(family: FlowFamily) -> Self {
        match family {
            FlowFamily::Vp => Self::vp(),
            FlowFamily::Ve => Self::ve(),
            FlowFamily::LinearEdm => Self::edm(),
            FlowFamily::RectifiedFlow => Self::rectified(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.t_min >= 0.0
            && self.t_min < self.t_max
            && self.t_max.is_finite()
            && self.sample_floor >= self.t_min
            && self.sample_floor < self.t_max
            && self.sigma_data > 0.0;
        if !ok {
            return Err(Error::invalid(alloc::format!("invalid flow spec {self:?}")));
        }
        if matches!(self.family, FlowFamily::Vp | FlowFamily::RectifiedFlow) && self.t_max > 1.0 {
            return Err(Error::invalid("VP and rectified flows live on [0, 1]"));
        }
        Ok(())
    }

    /// Times below this are refused by the posterior oracles.
    pub fn oracle_floor(&self) -> f64 {
        1e-3 * self.t_max
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if t >= self.t_min && t <= self.t_max {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange {
                t,
                lo: self.t_min,
                hi: self.t_max,
            })
        }
    }

    pub fn coefficients(&self, t: f64) -> Result<Coefficients> {
        self.check_time(t)?;
        let c = match self.family {
            FlowFamily::Vp => {
                let (sin, cos) = libm::sincos(FRAC_PI_2 * t);
                Coefficients {
                    a: cos,
                    da: -FRAC_PI_2 * sin,
                    s: sin,
                    ds: FRAC_PI_2 * cos,
                }
            }
            FlowFamily::Ve => {
                let s = libm::sqrt(t);
                Coefficients {
                    a: 1.0,
                    da: 0.0,
                    s,
                    ds: 0.5 / s,
                }
            }
            FlowFamily::LinearEdm => Coefficients {
                a: 1.0,
                da: 0.0,
                s: t,
                ds: 1.0,
            },
            FlowFamily::RectifiedFlow => Coefficients {
                a: 1.0 - t,
                da: -1.0,
                s: t,
                ds: 1.0,
            },
        };
        Ok(c)
    }

    /// `X_t` for one datum and one noise draw.
    pub fn interpolate(&self, x0: &[f64], noise: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len(x0, noise)?;
        let c = self.coefficients(t)?;
        Ok(x0.iter().zip(noise).map(|(&x, &n)| c.a * x + c.s * n).collect())
    }

    /// Analytic `d X_t / dt`.
    pub fn velocity(&self, x0: &[f64], noise: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len(x0, noise)?;
        let c = self.coefficients(t)?;
        if !c.ds.is_finite() {
            return Err(Error::invalid(alloc::format!(
                "{} velocity undefined at t = {t}",
                self.family.name()
            )));
        }
        Ok(x0.iter().zip(noise).map(|(&x, &n)| c.da * x + c.ds * n).collect())
    }

    /// Standard deviation of the declared prior `X_{t_max} ~ N(0, s^2 I)`.
    pub fn prior_std(&self) -> f64 {
        match self.family {
            FlowFamily::Vp | FlowFamily::RectifiedFlow => 1.0,
            FlowFamily::Ve => libm::sqrt(self.t_max),
            FlowFamily::LinearEdm => self.t_max,
        }
    }

    pub fn sample_prior(&self, rng: &mut Rng, dim: usize) -> Vec<f64> {
        let std = self.prior_std();
        (0..dim).map(|_| std * rng::normal(rng)).collect()
    }

    /// Velocity of the flow when the data distribution is a point mass at
    /// the origin: `s'(t) / s(t) * x`. Used as the analytical first step.
    pub fn prior_velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let c = self.coefficients(t)?;
        if c.s <= 0.0 {
            return Err(Error::invalid("prior velocity undefined at s(t) = 0"));
        }
        let k = c.ds / c.s;
        Ok(x.iter().map(|v| k * v).collect())
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: "flow",
            lhs: alloc::vec![a.len()],
            rhs: alloc::vec![b.len()],
        })
    }
}
