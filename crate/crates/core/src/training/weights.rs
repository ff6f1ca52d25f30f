use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::flows::FiniteDataset;
use crate::fsq::EncoderNet;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Codebooks larger than this store weights sparsely.
pub const DENSE_LIMIT: u64 = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
enum Storage {
    Dense(Vec<f64>),
    Sparse(BTreeMap<u64, f64>),
}

/// Unnormalized nonnegative weights over code indices, normalized at query
/// time. Online collection keeps an EMA of per-batch code frequencies;
/// offline collection stores an exact histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingWeights {
    size: u64,
    decay: Option<f64>,
    storage: Storage,
}

impl SamplingWeights {
    /// All-zero weights with EMA decay `mu` in `(0, 1)`.
    pub fn new(size: u64, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::invalid(alloc::format!("EMA decay {decay} outside (0, 1)")));
        }
        Ok(Self {
            size,
            decay: Some(decay),
            storage: Self::empty_storage(size)?,
        })
    }

    fn empty_storage(size: u64) -> Result<Storage> {
        if size == 0 {
            return Err(Error::invalid("empty codebook"));
        }
        Ok(if size <= DENSE_LIMIT {
            Storage::Dense(vec![0.0; size as usize])
        } else {
            Storage::Sparse(BTreeMap::new())
        })
    }

    /// Normalized histogram of `codes`.
    pub fn histogram(size: u64, codes: &[u64]) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut w = Self {
            size,
            decay: None,
            storage: Self::empty_storage(size)?,
        };
        check_range(codes, size)?;
        let unit = 1.0 / codes.len() as f64;
        for &c in codes {
            *w.slot(c) += unit;
        }
        Ok(w)
    }

    /// One-hot weights at `index`.
    pub fn one_hot(size: u64, index: u64) -> Result<Self> {
        Self::histogram(size, &[index])
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn decay(&self) -> Option<f64> {
        self.decay
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.storage, Storage::Sparse(_))
    }

    fn slot(&mut self, index: u64) -> &mut f64 {
        match &mut self.storage {
            Storage::Dense(v) => &mut v[index as usize],
            Storage::Sparse(m) => m.entry(index).or_insert(0.0),
        }
    }

    /// Raw (unnormalized) weight of `index`.
    pub fn get(&self, index: u64) -> f64 {
        match &self.storage {
            Storage::Dense(v) => v.get(index as usize).copied().unwrap_or(0.0),
            Storage::Sparse(m) => m.get(&index).copied().unwrap_or(0.0),
        }
    }

    /// Nonzero raw entries in index order.
    pub fn entries(&self) -> Vec<(u64, f64)> {
        match &self.storage {
            Storage::Dense(v) => v
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(i, &w)| (i as u64, w))
                .collect(),
            Storage::Sparse(m) => m.iter().filter(|(_, &w)| w > 0.0).map(|(&i, &w)| (i, w)).collect(),
        }
    }

    /// Rebuilds weights from saved raw entries.
    pub fn from_entries(size: u64, decay: Option<f64>, entries: &[(u64, f64)]) -> Result<Self> {
        let mut w = Self {
            size,
            decay,
            storage: Self::empty_storage(size)?,
        };
        for &(i, v) in entries {
            if i >= size {
                return Err(Error::CodeIndexOutOfRange { index: i, size });
            }
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid("sampling weights must be finite and nonnegative"));
            }
            *w.slot(i) = v;
        }
        Ok(w)
    }

    pub fn total(&self) -> f64 {
        self.entries().iter().map(|(_, w)| w).sum()
    }

    /// Nonzero entries divided by their sum.
    pub fn normalized(&self) -> Result<Vec<(u64, f64)>> {
        let e = self.entries();
        let total: f64 = e.iter().map(|(_, w)| w).sum();
        if !(total > 0.0) {
            return Err(Error::ZeroWeights);
        }
        Ok(e.into_iter().map(|(i, w)| (i, w / total)).collect())
    }

    /// Draws a code index with probability proportional to its weight.
    pub fn sample(&self, rng: &mut Rng) -> Result<u64> {
        let e = self.normalized()?;
        let u = rng::uniform(rng, 0.0, 1.0);
        let mut acc = 0.0;
        for &(i, p) in &e {
            acc += p;
            if u < acc {
                return Ok(i);
            }
        }
        Ok(e[e.len() - 1].0)
    }

    /// Shannon entropy (nats) of the normalized weights; 0 when all zero.
    pub fn entropy(&self) -> f64 {
        self.normalized()
            .map(|e| e.iter().map(|&(_, p)| -p * libm::log(p)).sum())
            .unwrap_or(0.0)
    }

    /// Total-variation distance between the normalized weights.
    pub fn tv_distance(&self, other: &SamplingWeights) -> Result<f64> {
        let a: BTreeMap<u64, f64> = self.normalized()?.into_iter().collect();
        let b: BTreeMap<u64, f64> = other.normalized()?.into_iter().collect();
        let mut keys: Vec<u64> = a.keys().chain(b.keys()).copied().collect();
        keys.sort_unstable();
        keys.dedup();
        let l1: f64 = keys
            .iter()
            .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
            .sum();
        Ok(0.5 * l1)
    }
}

fn check_range(codes: &[u64], size: u64) -> Result<()> {
    match codes.iter().find(|&&c| c >= size) {
        Some(&index) => Err(Error::CodeIndexOutOfRange { index, size }),
        None => Ok(()),
    }
}

/// `w <- mu w + (1 - mu) count(codes) / |codes|`.
pub fn collect_weights_online(w: &mut SamplingWeights, codes: &[u64]) -> Result<()> {
    if codes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_range(codes, w.size)?;
    let mu = w
        .decay
        .ok_or_else(|| Error::invalid("offline weights have no EMA decay"))?;
    match &mut w.storage {
        Storage::Dense(v) => v.iter_mut().for_each(|x| *x *= mu),
        Storage::Sparse(m) => m.values_mut().for_each(|x| *x *= mu),
    }
    let unit = (1.0 - mu) / codes.len() as f64;
    for &c in codes {
        *w.slot(c) += unit;
    }
    Ok(())
}

/// Exact normalized histogram of the encoder's codes over `data`.
pub fn collect_weights_offline(encoder: &EncoderNet, data: &FiniteDataset) -> Result<SamplingWeights> {
    let mut codes = Vec::with_capacity(data.len());
    let chunk = 1024 * data.dim();
    for rows in data.points().chunks(chunk) {
        codes.extend(encoder.encode(rows)?.iter().map(|c| c.index()));
    }
    SamplingWeights::histogram(encoder.codebook().size(), &codes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_counts_are_frequencies() {
        let mut w = SamplingWeights::new(4, 0.5).unwrap();
        collect_weights_online(&mut w, &[0, 0, 1, 1]).unwrap();
        // (1 - mu) * [0.5, 0.5, 0, 0]
        assert_eq!(w.entries(), vec![(0, 0.25), (1, 0.25)]);
        assert_eq!(w.normalized().unwrap(), vec![(0, 0.5), (1, 0.5)]);
    }

    #[test]
    fn single_code_batch_update() {
        let mu = 0.9;
        let mut w = SamplingWeights::from_entries(4, Some(mu), &[(0, 0.3), (2, 0.1)]).unwrap();
        collect_weights_online(&mut w, &[3, 3, 3]).unwrap();
        assert!((w.get(0) - mu * 0.3).abs() < 1e-15);
        assert!((w.get(2) - mu * 0.1).abs() < 1e-15);
        assert!((w.get(3) - (1.0 - mu)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_batches() {
        let mut w = SamplingWeights::new(4, 0.5).unwrap();
        assert_eq!(collect_weights_online(&mut w, &[]).unwrap_err(), Error::EmptyBatch);
        assert!(matches!(
            collect_weights_online(&mut w, &[4]),
            Err(Error::CodeIndexOutOfRange { index: 4, size: 4 })
        ));
        assert_eq!(w.normalized().unwrap_err(), Error::ZeroWeights);
    }

    #[test]
    fn sparse_storage_for_large_codebooks() {
        let mut w = SamplingWeights::new(1 << 20, 0.9).unwrap();
        assert!(w.is_sparse());
        collect_weights_online(&mut w, &[5, 1 << 19]).unwrap();
        let n = w.normalized().unwrap();
        assert_eq!(n, vec![(5, 0.5), (1 << 19, 0.5)]);
    }

    #[test]
    fn histogram_of_unique_codes_is_uniform() {
        let w = SamplingWeights::histogram(16, &[1, 4, 9, 12]).unwrap();
        for (_, p) in w.normalized().unwrap() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert_eq!(w.get(0), 0.0);
        let one = SamplingWeights::one_hot(16, 3).unwrap();
        assert_eq!(one.normalized().unwrap(), vec![(3, 1.0)]);
        assert!((w.tv_distance(&one).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(w.tv_distance(&w).unwrap(), 0.0);
    }

    #[test]
    fn stationary_stream_converges_geometrically() {
        let p = [0.5, 0.3, 0.2];
        let mu: f64 = 0.8;
        let mut w = SamplingWeights::new(3, mu).unwrap();
        // A batch with exact frequencies p removes the MC noise.
        let batch: Vec<u64> = [0u64; 5].iter().chain(&[1; 3]).chain(&[2; 2]).copied().collect();
        for k in 1..=40 {
            collect_weights_online(&mut w, &batch).unwrap();
            let l1: f64 = (0..3).map(|i| (w.get(i as u64) - p[i]).abs()).sum();
            assert!(l1 <= libm::pow(mu, k as f64) * 1.0 + 1e-12);
        }
    }
}
