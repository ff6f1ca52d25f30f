//! A trained model (flow, denoiser, optional encoder) and the velocity
//! predictor interface shared by losses, solvers and metrics.

use alloc::vec::Vec;

use crate::denoiser::DenoiserNet;
use crate::flows::{oracle_velocity, oracle_velocity_conditional, FiniteDataset, FlowSpec};
use crate::fsq::{code_digits, CodebookConfig, EncoderNet};
use crate::{Error, Result};

/// Something that predicts velocities row by row, each row at its own time
/// and, for conditional predictors, under its own code index.
pub trait VelocityPredictor {
    fn dim(&self) -> usize;

    /// `None` for unconditional predictors.
    fn codebook(&self) -> Option<CodebookConfig>;

    fn predict(&self, x: &[f64], t: &[f64], codes: Option<&[u64]>) -> Result<Vec<f64>>;
}

/// Expands code indices into the flat `[B, d]` digit table.
pub fn digit_table(codes: &[u64], codebook: &CodebookConfig) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(codes.len() * codebook.channels());
    for &c in codes {
        out.extend(code_digits(c, codebook)?.into_iter().map(f64::from));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub flow: FlowSpec,
    pub denoiser: DenoiserNet,
    pub encoder: Option<EncoderNet>,
}

impl Model {
    pub fn new(flow: FlowSpec, denoiser: DenoiserNet, encoder: Option<EncoderNet>) -> Result<Self> {
        flow.validate()?;
        let den_cb = denoiser.config().codebook;
        let enc_cb = encoder.as_ref().map(|e| *e.codebook());
        if den_cb != enc_cb {
            return Err(Error::invalid("denoiser and encoder disagree on the codebook"));
        }
        Ok(Self {
            flow,
            denoiser,
            encoder,
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.encoder.is_some()
    }

    /// Code index of every row of `x`.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<u64>> {
        let enc = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::invalid("unconditional model has no encoder"))?;
        Ok(enc.encode(x)?.iter().map(|c| c.index()).collect())
    }

    fn digits(&self, rows: usize, codes: Option<&[u64]>) -> Result<Option<Vec<f64>>> {
        match (self.denoiser.config().codebook, codes) {
            (Some(cb), Some(c)) => {
                if c.len() != rows {
                    return Err(Error::invalid("one code per row required"));
                }
                digit_table(c, &cb).map(Some)
            }
            (None, None) => Ok(None),
            (Some(_), None) => Err(Error::invalid("conditional model needs codes")),
            (None, Some(_)) => Err(Error::invalid("unconditional model given codes")),
        }
    }

    pub fn denoise(&self, x: &[f64], t: &[f64], codes: Option<&[u64]>) -> Result<Vec<f64>> {
        let digits = self.digits(t.len(), codes)?;
        self.denoiser.denoise(&self.flow, x, t, digits.as_deref())
    }
}

impl VelocityPredictor for Model {
    fn dim(&self) -> usize {
        self.denoiser.config().data_dim
    }

    fn codebook(&self) -> Option<CodebookConfig> {
        self.denoiser.config().codebook
    }

    fn predict(&self, x: &[f64], t: &[f64], codes: Option<&[u64]>) -> Result<Vec<f64>> {
        let digits = self.digits(t.len(), codes)?;
        self.denoiser.velocity(&self.flow, x, t, digits.as_deref())
    }
}

/// The exact posterior velocity of a finite dataset, conditional on the
/// dataset's codes when `conditional` is set.
#[derive(Clone, Debug)]
pub struct OracleVelocity<'a> {
    pub flow: FlowSpec,
    pub data: &'a FiniteDataset,
    pub conditional: bool,
}

impl VelocityPredictor for OracleVelocity<'_> {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    /// Oracles index codes directly; there is no digit structure.
    fn codebook(&self) -> Option<CodebookConfig> {
        None
    }

    fn predict(&self, x: &[f64], t: &[f64], codes: Option<&[u64]>) -> Result<Vec<f64>> {
        let dim = self.data.dim();
        let mut out = Vec::with_capacity(x.len());
        for (i, (row, &ti)) in x.chunks(dim).zip(t).enumerate() {
            let v = match (self.conditional, codes) {
                (true, Some(c)) => oracle_velocity_conditional(&self.flow, self.data, row, ti, c[i])?,
                (true, None) => return Err(Error::invalid("conditional oracle needs codes")),
                (false, _) => oracle_velocity(&self.flow, self.data, row, ti)?,
            };
            out.extend(v);
        }
        Ok(out)
    }
}

/// A predictor that always returns zero.
#[derive(Clone, Copy, Debug)]
pub struct ZeroVelocity {
    pub dim: usize,
}

impl VelocityPredictor for ZeroVelocity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn codebook(&self) -> Option<CodebookConfig> {
        None
    }

    fn predict(&self, x: &[f64], _t: &[f64], _codes: Option<&[u64]>) -> Result<Vec<f64>> {
        Ok(alloc::vec![0.0; x.len()])
    }
}
