use alloc::vec::Vec;

use crate::{Error, Result};

/// A finite empirical data distribution: `len` points of dimension `dim`,
/// optional probability weights (uniform when absent) and optional
/// per-point condition codes.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDataset {
    dim: usize,
    points: Vec<f64>,
    weights: Option<Vec<f64>>,
    codes: Option<Vec<u64>>,
}

impl FiniteDataset {
    /// `points` is row-major, one datum per `dim` values.
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::invalid(alloc::format!(
                "dataset needs a positive dimension and a nonempty multiple of it ({} values, dim {dim})",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset"));
        }
        Ok(Self {
            dim,
            points,
            weights: None,
            codes: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("dataset rows differ in length"));
        }
        Self::new(dim, rows.concat())
    }

    /// Attaches probability weights; they are normalized to sum to one.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.len() != self.len() || weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
            return Err(Error::invalid(
                "weights must be nonnegative, one per point, with positive sum",
            ));
        }
        self.weights = Some(weights.into_iter().map(|w| w / total).collect());
        Ok(self)
    }

    pub fn with_codes(mut self, codes: Vec<u64>) -> Result<Self> {
        if codes.len() != self.len() {
            return Err(Error::invalid("one code per point required"));
        }
        self.codes = Some(codes);
        Ok(self)
    }

    pub fn without_codes(mut self) -> Self {
        self.codes = None;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.dim)
    }

    /// Probability of point `i`.
    pub fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            Some(w) => w[i],
            None => 1.0 / self.len() as f64,
        }
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn codes(&self) -> Option<&[u64]> {
        self.codes.as_deref()
    }

    pub fn code(&self, i: usize) -> Option<u64> {
        self.codes.as_ref().map(|c| c[i])
    }

    /// Indices of points carrying `code`.
    pub fn slice(&self, code: u64) -> Result<Vec<usize>> {
        let codes = self
            .codes
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset has no condition codes"))?;
        let idx: Vec<usize> = codes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == code)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            Err(Error::EmptyCodeSlice(code))
        } else {
            Ok(idx)
        }
    }

    /// Draws an index according to the point weights.
    pub fn sample_index(&self, rng: &mut crate::rng::Rng) -> usize {
        match &self.weights {
            None => crate::rng::index(rng, self.len()),
            Some(w) => {
                let u = crate::rng::uniform(rng, 0.0, 1.0);
                let mut acc = 0.0;
                for (i, wi) in w.iter().enumerate() {
                    acc += wi;
                    if u < acc {
                        return i;
                    }
                }
                self.len() - 1
            }
        }
    }
}
