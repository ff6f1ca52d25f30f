//! Finite scalar quantization of encoder outputs into condition codes.
//!
//! Each channel `y_i` maps to the digit `min(floor(L * sigmoid(y_i)), L - 1)`,
//! so a `d`-channel output lands in the implicit codebook `{0..L-1}^d` of
//! size `L^d`. Training passes gradients straight through the quantizer.
//! Codes are indexed little-endian: `index = sum_i digit_i * L^i`.

mod encoder;

pub use encoder::{EncoderArch, EncoderNet};

use alloc::vec::Vec;

use crate::tensor::{sigmoid, Tape, Var};
use crate::{Error, Result};

/// `L` levels per channel, `d` channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CodebookConfig {
    levels: u32,
    channels: u32,
    size: u64,
}

impl CodebookConfig {
    pub fn new(levels: u32, channels: u32) -> Result<Self> {
        if levels < 2 || channels < 1 {
            return Err(Error::invalid(alloc::format!(
                "codebook needs L >= 2 and d >= 1, got L = {levels}, d = {channels}"
            )));
        }
        let size = (levels as u64)
            .checked_pow(channels)
            .ok_or_else(|| Error::invalid(alloc::format!("codebook {levels}^{channels} overflows 64 bits")))?;
        Ok(Self { levels, channels, size })
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn channels(&self) -> usize {
        self.channels as usize
    }

    /// `L^d`.
    pub fn size(&self) -> u64 {
        self.size
    }

    /// `(L - 1) / 2`, subtracted from digits before embedding.
    pub fn center(&self) -> f64 {
        (self.levels - 1) as f64 / 2.0
    }
}

/// A quantized condition: digits plus their flat index.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConditionCode {
    digits: Vec<u32>,
    index: u64,
}

impl ConditionCode {
    pub fn from_digits(digits: Vec<u32>, config: &CodebookConfig) -> Result<Self> {
        let index = code_index(&digits, config)?;
        Ok(Self { digits, index })
    }

    pub fn from_index(index: u64, config: &CodebookConfig) -> Result<Self> {
        let digits = code_digits(index, config)?;
        Ok(Self { digits, index })
    }

    pub fn digits(&self) -> &[u32] {
        &self.digits
    }

    pub fn index(&self) -> u64 {
        self.index
    }
}

#[inline]
fn quantize_scalar(y: f64, levels: u32) -> f64 {
    let top = (levels - 1) as f64;
    libm::floor(sigmoid(y) * levels as f64).clamp(0.0, top)
}

/// Per-channel digits `min(floor(L * sigmoid(y_i)), L - 1)`.
pub fn quantize(y: &[f64], config: &CodebookConfig) -> Result<Vec<u32>> {
    if y.len() != config.channels() {
        return Err(Error::ShapeMismatch {
            op: "quantize",
            lhs: alloc::vec![config.channels()],
            rhs: alloc::vec![y.len()],
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantize"));
    }
    Ok(y.iter().map(|&v| quantize_scalar(v, config.levels) as u32).collect())
}

/// Straight-through quantization of a `[B, d]` tensor.
///
/// Forward value: the quantized digits as reals, bit for bit equal to
/// [`quantize`]. Backward: the identity, as in `y + sg(f(y) - y)`.
pub fn ste_quantize(tape: &mut Tape, y: Var, config: &CodebookConfig) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    if shape.last() != Some(&config.channels()) {
        return Err(Error::ShapeMismatch {
            op: "ste_quantize",
            lhs: alloc::vec![config.channels()],
            rhs: shape,
        });
    }
    let s = tape.sigmoid(y)?;
    let scaled = tape.scale(s, config.levels as f64)?;
    let floored = tape.floor(scaled)?;
    let digits = tape.clamp(floored, 0.0, (config.levels - 1) as f64)?;
    tape.straight_through(y, digits)
}

/// Little-endian base-`L` index of `digits`.
pub fn code_index(digits: &[u32], config: &CodebookConfig) -> Result<u64> {
    if digits.len() != config.channels() {
        return Err(Error::ShapeMismatch {
            op: "code_index",
            lhs: alloc::vec![config.channels()],
            rhs: alloc::vec![digits.len()],
        });
    }
    let l = config.levels as u64;
    let mut index = 0u64;
    let mut place = 1u64;
    for (channel, &digit) in digits.iter().enumerate() {
        if digit >= config.levels {
            return Err(Error::DigitOutOfRange {
                channel,
                digit,
                levels: config.levels,
            });
        }
        index += digit as u64 * place;
        // The last multiplication may overflow when L^d == 2^64 exactly.
        place = place.wrapping_mul(l);
    }
    Ok(index)
}

/// Inverse of [`code_index`].
pub fn code_digits(index: u64, config: &CodebookConfig) -> Result<Vec<u32>> {
    if index >= config.size {
        return Err(Error::CodeIndexOutOfRange {
            index,
            size: config.size,
        });
    }
    let l = config.levels as u64;
    let mut rest = index;
    Ok((0..config.channels)
        .map(|_| {
            let d = (rest % l) as u32;
            rest /= l;
            d
        })
        .collect())
}

/// Digits of each row of a `[B, d]` quantized tensor, as codes.
pub fn codes_from_quantized(values: &[f64], config: &CodebookConfig) -> Result<Vec<ConditionCode>> {
    values
        .chunks(config.channels())
        .map(|row| ConditionCode::from_digits(row.iter().map(|&v| v as u32).collect(), config))
        .collect()
}
