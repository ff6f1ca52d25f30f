//! Exact 2-Wasserstein distance, trajectory curvature, per-time loss
//! profiles and the one-step Wasserstein bound check.

mod bound;
mod profile;

pub use bound::{check_theorem_bound, BoundCheckReport, BoundConfig};
pub use profile::{l_cfm_profile, LossProfile};

use alloc::vec;
use alloc::vec::Vec;

use crate::samplers::TrajectoryRecord;
use crate::{Error, Result};

/// Largest point set accepted by [`wasserstein2`].
pub const EXACT_LIMIT: usize = 1024;

/// Minimum-cost perfect matching on an `n x n` row-major cost matrix
/// (Hungarian method with potentials). Returns `assignment[row] = col`.
pub fn optimal_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::ShapeMismatch {
            op: "assignment",
            lhs: vec![n, n],
            rhs: vec![cost.len()],
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment"));
    }
    let a = |i: usize, j: usize| cost[(i - 1) * n + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Exact 2-Wasserstein distance between two equal-size uniform empirical
/// measures of `dim`-dimensional rows.
pub fn wasserstein2(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || !a.len().is_multiple_of(dim) || a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "wasserstein2",
            lhs: vec![a.len() / dim.max(1), dim],
            rhs: vec![b.len() / dim.max(1), dim],
        });
    }
    let n = a.len() / dim;
    if n > EXACT_LIMIT {
        return Err(Error::invalid(alloc::format!(
            "exact matching limited to {EXACT_LIMIT} points, got {n}"
        )));
    }
    let mut cost = vec![0.0; n * n];
    for (i, pa) in a.chunks(dim).enumerate() {
        for (j, pb) in b.chunks(dim).enumerate() {
            cost[i * n + j] = pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    let assignment = optimal_assignment(&cost, n)?;
    // Sum in sorted order so swapping the arguments is bitwise symmetric.
    let mut matched: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).collect();
    matched.sort_by(f64::total_cmp);
    let total: f64 = matched.iter().sum();
    Ok(libm::sqrt(total / n as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureReport {
    pub per_trajectory: Vec<f64>,
    pub mean: f64,
}

/// For each trajectory (each batch row of each record), the mean over
/// interior grid points of `|v(Z_t, t) - (Z_end - Z_start) / (t_end - t_start)|^2`.
pub fn curvature(records: &[TrajectoryRecord], dim: usize) -> Result<CurvatureReport> {
    let mut per = Vec::new();
    for rec in records {
        let n = rec.times.len();
        if n < 3 || rec.states.len() != n || rec.velocities.len() != n {
            return Err(Error::invalid(
                "curvature needs at least 3 grid points with states and velocities",
            ));
        }
        let span = rec.times[n - 1] - rec.times[0];
        if span == 0.0 {
            return Err(Error::invalid("degenerate trajectory: t_min == t_max"));
        }
        let rows = rec.states[0].len() / dim;
        for r in 0..rows {
            let cols = r * dim..(r + 1) * dim;
            let start = &rec.states[0][cols.clone()];
            let end = &rec.states[n - 1][cols.clone()];
            let chord: Vec<f64> = start.iter().zip(end).map(|(s, e)| (e - s) / span).collect();
            let mut total = 0.0;
            let mut count = 0usize;
            for v in rec.velocities[1..n - 1].iter() {
                let v = v
                    .as_ref()
                    .ok_or_else(|| Error::invalid("missing velocity at an interior grid point"))?;
                total += v[cols.clone()]
                    .iter()
                    .zip(&chord)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>();
                count += 1;
            }
            per.push(total / count as f64);
        }
    }
    if per.is_empty() {
        return Err(Error::invalid("no trajectories"));
    }
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok(CurvatureReport {
        per_trajectory: per,
        mean,
    })
}
