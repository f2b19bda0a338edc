use thiserror::Error;

use crate::coherence::GaussianFit;
use crate::tracking::TrackingReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite input `{0}`")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("unknown {what} `{name}`")]
    Unknown { what: &'static str, name: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("Gaussian fit did not converge after {iterations} iterations")]
    NoConvergence {
        iterations: usize,
        last: Box<GaussianFit>,
    },

    #[error("no disk found above the half-maximum threshold")]
    NoDisk,

    #[error("tracking lost at t = {time:.3} s: sun left the tracking camera field of view")]
    TrackingLost {
        time: f64,
        report: Option<Box<TrackingReport>>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub(crate) fn ensure_finite(name: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(name))
    }
}
