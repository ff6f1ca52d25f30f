use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the core can report.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced or consumed by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape")]
    BackwardReplayed,
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("time {t} outside [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("time {t} below the oracle floor {floor}")]
    BelowTimeFloor { t: f64, floor: f64 },
    #[error("no dataset point carries code {0}")]
    EmptyCodeSlice(u64),
    #[error("digit {digit} at channel {channel} outside 0..{levels}")]
    DigitOutOfRange { channel: usize, digit: u32, levels: u32 },
    #[error("code index {index} outside a codebook of size {size}")]
    CodeIndexOutOfRange { index: u64, size: u64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("sampling weights are all zero")]
    ZeroWeights,
    #[error("non-finite solver state at step {step}")]
    NonFiniteState { step: usize },
    #[error("step size underflow at t = {t} (h = {h})")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("{got} Monte-Carlo samples requested, at least {min} required")]
    TooFewSamples { got: usize, min: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
