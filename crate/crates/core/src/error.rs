use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the block models and analyses.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("input underrange: {volts} V is below the V2T threshold {threshold} V")]
    Underrange { volts: f64, threshold: f64 },

    #[error("input overrange: {volts} V is above the supply {vdd} V")]
    Overrange { volts: f64, vdd: f64 },

    #[error("slice {slice}, cycle {cycle}: {source}")]
    Conversion {
        slice: usize,
        cycle: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("delay chain underspan: total delay {total_s:e} s is shorter than the clock period {period_s:e} s")]
    ChainUnderspan { total_s: f64, period_s: f64 },

    #[error("unconvergent trim: {remaining} inversion(s) remain after {iterations} iteration(s)")]
    UnconvergentTrim { iterations: usize, remaining: usize },

    #[error("insufficient calibration coverage for codes {codes:?}")]
    InsufficientCoverage { codes: Vec<i32> },

    #[error("non-coherent tone {fin_hz} Hz; nearest coherent frequency is {suggested_hz} Hz")]
    NonCoherent { fin_hz: f64, suggested_hz: f64 },

    #[error("sampler is correlated with the measured clock (period ratio ~ {num}/{den})")]
    CorrelatedSampler { num: u64, den: u64 },

    #[error("undersampled histogram: {total} hits, at least {required} required")]
    UndersampledHistogram { total: u64, required: u64 },

    #[error("inconsistent stream lengths: {0}")]
    StreamLength(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// Wraps a conversion failure with the slice and cycle it happened in.
    pub fn at(self, slice: usize, cycle: usize) -> Self {
        Error::Conversion {
            slice,
            cycle,
            source: Box::new(self),
        }
    }
}
