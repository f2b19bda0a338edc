//! Illumination models and coherence functions.
//!
//! Filtered sunlight is modeled with a Gaussian power spectrum over wavenumber
//! (mean `κ̄`, standard deviation `Δκ`) and a uniform angular spread of full
//! width `Δθ`. These give the temporal coherence function
//! `exp(-(Δκ·τ)²/2)`, the spatial coherence function `sinc(2·ε·κ̄·Δθ)`, and
//! the coherence lengths `L_T = 1/Δκ`, `L_S = 1/(κ̄·Δθ)`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Sinc convention used by [`spatial_coherence`]: `sin(x)/x`, not `sin(πx)/(πx)`.
pub const SINC_IS_NORMALIZED: bool = false;

/// Half-width of the sampled spectrum, in units of `Δκ`.
pub const SPECTRAL_SPAN_SIGMAS: f64 = 4.0;

/// Angular diameter of the Sun as measured by the tracking camera, degrees.
pub const SOLAR_ANGULAR_DIAMETER_DEG: f64 = 0.57;

/// Coherence lengths quoted for the outdoor prototype (550 nm, 20 nm filter).
pub const MEASURED_TEMPORAL_COHERENCE_UM: f64 = 10.0;
pub const MEASURED_SPATIAL_COHERENCE_UM: f64 = 100.0;

/// `sin(x)/x` with `sinc(0) = 1`.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// How a filter's quoted bandwidth in nanometers should be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthConvention {
    /// The quoted width is already a Gaussian standard deviation.
    StdDev,
    /// The quoted width is a full width at half maximum.
    Fwhm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IlluminationModel {
    /// κ̄, rad/µm.
    pub mean_wavenumber: f64,
    /// Δκ, rad/µm (Gaussian standard deviation).
    pub spectral_bandwidth: f64,
    /// Δθ, rad (full width of the uniform angular distribution).
    pub angular_bandwidth: f64,
    /// K, spectral samples used by brute-force spectral summation.
    pub num_spectral_samples: usize,
}

impl IlluminationModel {
    pub fn new(
        mean_wavenumber: f64,
        spectral_bandwidth: f64,
        angular_bandwidth: f64,
        num_spectral_samples: usize,
    ) -> Result<Self> {
        let model = Self {
            mean_wavenumber,
            spectral_bandwidth,
            angular_bandwidth,
            num_spectral_samples,
        };
        model.validate()?;
        Ok(model)
    }

    /// Builds a model from a central wavelength and a spectral bandwidth, both in µm.
    pub fn from_wavelength(
        wavelength: f64,
        spectral_bandwidth: f64,
        angular_bandwidth: f64,
    ) -> Result<Self> {
        ensure_finite("wavelength", wavelength)?;
        if wavelength <= 0.0 {
            return Err(Error::param("wavelength", "must be positive"));
        }
        Self::new(TAU / wavelength, spectral_bandwidth, angular_bandwidth, 201)
    }

    /// Builds a model from a bandpass filter spec given in nanometers.
    ///
    /// The wavelength width is mapped to wavenumber through `Δκ = 2π·Δλ/λ̄²`;
    /// `convention` says whether `bandwidth_nm` is a standard deviation or a FWHM.
    pub fn from_filter_nm(
        center_nm: f64,
        bandwidth_nm: f64,
        convention: BandwidthConvention,
        angular_bandwidth: f64,
    ) -> Result<Self> {
        ensure_finite("center_nm", center_nm)?;
        ensure_finite("bandwidth_nm", bandwidth_nm)?;
        if center_nm <= 0.0 || bandwidth_nm <= 0.0 {
            return Err(Error::param("bandwidth_nm", "filter center and width must be positive"));
        }
        let lambda = center_nm * 1e-3;
        let width = bandwidth_nm * 1e-3;
        let sigma_lambda = match convention {
            BandwidthConvention::StdDev => width,
            BandwidthConvention::Fwhm => width / fwhm_per_sigma(),
        };
        Self::new(TAU / lambda, TAU * sigma_lambda / (lambda * lambda), angular_bandwidth, 201)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("mean_wavenumber", self.mean_wavenumber)?;
        ensure_finite("spectral_bandwidth", self.spectral_bandwidth)?;
        ensure_finite("angular_bandwidth", self.angular_bandwidth)?;
        if self.mean_wavenumber <= 0.0 {
            return Err(Error::param("mean_wavenumber", "must be positive"));
        }
        if self.spectral_bandwidth <= 0.0 {
            return Err(Error::param("spectral_bandwidth", "must be positive"));
        }
        if self.angular_bandwidth < 0.0 {
            return Err(Error::param("angular_bandwidth", "must be non-negative"));
        }
        if self.num_spectral_samples == 0 {
            return Err(Error::param("num_spectral_samples", "must be at least 1"));
        }
        Ok(())
    }

    /// λ̄ = 2π/κ̄, µm.
    pub fn mean_wavelength(&self) -> f64 {
        TAU / self.mean_wavenumber
    }

    pub fn coherence_lengths(&self) -> CoherenceLengths {
        coherence_lengths(self)
    }
}

impl Default for IlluminationModel {
    /// 550 nm light with `L_T = 10 µm` and the solar angular extent.
    fn default() -> Self {
        Self {
            mean_wavenumber: TAU / 0.55,
            spectral_bandwidth: 1.0 / MEASURED_TEMPORAL_COHERENCE_UM,
            angular_bandwidth: SOLAR_ANGULAR_DIAMETER_DEG.to_radians(),
            num_spectral_samples: 201,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceLengths {
    /// L_T, µm.
    pub temporal: f64,
    /// L_S, µm; `f64::INFINITY` for collimated light.
    pub spatial: f64,
}

/// Ratio of FWHM to standard deviation for a Gaussian, `2√(2 ln 2)`.
pub fn fwhm_per_sigma() -> f64 {
    2.0 * (2.0 * std::f64::consts::LN_2).sqrt()
}

/// Temporal coherence weight for a pathlength difference `tau` (µm).
pub fn temporal_coherence(tau: f64, spectral_bandwidth: f64) -> Result<f64> {
    ensure_finite("tau", tau)?;
    ensure_finite("spectral_bandwidth", spectral_bandwidth)?;
    if spectral_bandwidth <= 0.0 {
        return Err(Error::param("spectral_bandwidth", "must be positive"));
    }
    Ok(temporal_weight(tau, spectral_bandwidth))
}

#[inline]
pub(crate) fn temporal_weight(tau: f64, spectral_bandwidth: f64) -> f64 {
    let x = spectral_bandwidth * tau;
    (-0.5 * x * x).exp()
}

/// Spatial coherence weight for a lateral offset `eps` (µm).
pub fn spatial_coherence(eps: f64, mean_wavenumber: f64, angular_bandwidth: f64) -> Result<f64> {
    ensure_finite("eps", eps)?;
    ensure_finite("mean_wavenumber", mean_wavenumber)?;
    ensure_finite("angular_bandwidth", angular_bandwidth)?;
    if mean_wavenumber <= 0.0 {
        return Err(Error::param("mean_wavenumber", "must be positive"));
    }
    if angular_bandwidth < 0.0 {
        return Err(Error::param("angular_bandwidth", "must be non-negative"));
    }
    Ok(sinc(2.0 * eps * mean_wavenumber * angular_bandwidth))
}

/// Spatial coherence written in terms of `L_S` alone: `sinc(2ε/L_S)`.
#[inline]
pub(crate) fn spatial_weight(eps: f64, spatial_length: f64) -> f64 {
    if spatial_length.is_infinite() {
        1.0
    } else {
        sinc(2.0 * eps / spatial_length)
    }
}

pub fn coherence_lengths(illum: &IlluminationModel) -> CoherenceLengths {
    let spatial = if illum.angular_bandwidth == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (illum.mean_wavenumber * illum.angular_bandwidth)
    };
    CoherenceLengths {
        temporal: 1.0 / illum.spectral_bandwidth,
        spatial,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralSample {
    pub wavenumber: f64,
    pub weight: f64,
}

/// Uniform wavenumber grid over `κ̄ ± 4Δκ` with normalized Gaussian weights.
pub fn sample_spectrum(illum: &IlluminationModel, count: usize) -> Result<Vec<SpectralSample>> {
    illum.validate()?;
    if count == 0 {
        return Err(Error::param("count", "at least one spectral sample is required"));
    }
    if count == 1 {
        return Ok(vec![SpectralSample {
            wavenumber: illum.mean_wavenumber,
            weight: 1.0,
        }]);
    }
    let half = SPECTRAL_SPAN_SIGMAS * illum.spectral_bandwidth;
    let step = 2.0 * half / (count - 1) as f64;
    let mut samples: Vec<SpectralSample> = (0..count)
        .map(|j| {
            // offset from the center computed symmetrically so odd grids mirror exactly
            let offset = (j as f64 - (count - 1) as f64 / 2.0) * step;
            let z = offset / illum.spectral_bandwidth;
            SpectralSample {
                wavenumber: illum.mean_wavenumber + offset,
                weight: (-0.5 * z * z).exp(),
            }
        })
        .collect();
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    for s in &mut samples {
        s.weight /= total;
    }
    Ok(samples)
}

/// First zero of the spatial coherence function, `π/(2κ̄Δθ)`.
pub fn spatial_first_zero(mean_wavenumber: f64, angular_bandwidth: f64) -> f64 {
    PI / (2.0 * mean_wavenumber * angular_bandwidth)
}
