//! Coherence-length measurement.
//!
//! Temporal coherence comes from a Gaussian fit to an axial transient (the
//! square root of `τ` falls off like the temporal coherence function, whose
//! standard deviation is `L_T`); spatial coherence from the angular size of
//! the solar disk imaged at infinity focus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::fwhm_per_sigma;

const MAX_ITERATIONS: usize = 200;
const TOLERANCE: f64 = 1e-8;

/// `amplitude·exp(−(l−center)²/2σ²) + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub center: f64,
    pub sigma: f64,
    pub offset: f64,
    pub rms_residual: f64,
    pub iterations: usize,
}

impl GaussianFit {
    pub fn fwhm(&self) -> f64 {
        fwhm_per_sigma() * self.sigma
    }

    pub fn eval(&self, l: f64) -> f64 {
        model(&self.params(), l)
    }

    fn params(&self) -> [f64; 4] {
        [self.amplitude, self.center, self.sigma, self.offset]
    }
}

fn model(p: &[f64; 4], l: f64) -> f64 {
    let z = (l - p[1]) / p[2];
    p[0] * (-0.5 * z * z).exp() + p[3]
}

/// Model value and its gradient with respect to (A, µ, σ, b).
fn model_and_gradient(p: &[f64; 4], l: f64) -> (f64, [f64; 4]) {
    let [a, mu, s, b] = *p;
    let z = (l - mu) / s;
    let e = (-0.5 * z * z).exp();
    (a * e + b, [e, a * e * z / s, a * e * z * z / s, 1.0])
}

fn sum_squares(samples: &[(f64, f64)], p: &[f64; 4]) -> f64 {
    samples.iter().map(|&(l, v)| (v - model(p, l)).powi(2)).sum()
}

/// Solves the 4×4 symmetric system by Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut rhs: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col];
            for (dst, src) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *dst -= f * src;
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let tail: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (rhs[row] - tail) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn initial_guess(samples: &[(f64, f64)]) -> [f64; 4] {
    let &(mu, vmax) = samples
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty");
    let vmin = samples.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let (mut wsum, mut msum) = (0.0, 0.0);
    for &(l, v) in samples {
        let w = v - vmin;
        wsum += w;
        msum += w * (l - mu) * (l - mu);
    }
    let span = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max)
        - samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let mut sigma = (msum / wsum).sqrt();
    if !(sigma.is_finite() && sigma > 0.0) {
        sigma = span / 4.0;
    }
    [vmax - vmin, mu, sigma, vmin]
}

/// Damped (Levenberg-Marquardt) least-squares fit of a Gaussian plus offset.
///
/// Starts from the argmax sample, `A = max − min`, `b = min` and the second
/// moment about the argmax. Stops when every parameter changes by less than
/// 1e-8 relative, or fails after 200 iterations.
pub fn fit_gaussian(samples: &[(f64, f64)]) -> Result<GaussianFit> {
    if samples.len() < 5 {
        return Err(Error::param("samples", "at least 5 samples are required"));
    }
    if samples.iter().any(|(l, v)| !l.is_finite() || !v.is_finite()) {
        return Err(Error::NonFinite("samples"));
    }
    let first = samples[0].1;
    if samples.iter().all(|s| s.1 == first) {
        return Err(Error::Degenerate("all sample values are equal".into()));
    }

    let mut p = initial_guess(samples);
    let mut cost = sum_squares(samples, &p);
    let mut lambda = 1e-3;
    let finish = |p: [f64; 4], cost: f64, iterations: usize| GaussianFit {
        amplitude: p[0],
        center: p[1],
        sigma: p[2].abs(),
        offset: p[3],
        rms_residual: (cost / samples.len() as f64).sqrt(),
        iterations,
    };

    for iteration in 1..=MAX_ITERATIONS {
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for &(l, v) in samples {
            let (f, g) = model_and_gradient(&p, l);
            let res = v - f;
            for i in 0..4 {
                jtr[i] += g[i] * res;
                for j in 0..4 {
                    jtj[i][j] += g[i] * g[j];
                }
            }
        }

        // try increasingly damped steps until one lowers the cost
        let mut improved = None;
        while lambda < 1e16 {
            let mut damped = jtj;
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] += lambda * jtj[i][i].max(1e-12);
            }
            if let Some(delta) = solve4(damped, jtr) {
                let trial = [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2], p[3] + delta[3]];
                let trial_cost = sum_squares(samples, &trial);
                if trial[2] != 0.0 && trial_cost.is_finite() && trial_cost <= cost {
                    improved = Some((trial, trial_cost, delta));
                    break;
                }
            }
            lambda *= 10.0;
        }

        let Some((trial, trial_cost, delta)) = improved else {
            // no descent direction left: at a minimum to working precision
            return Ok(finish(p, cost, iteration));
        };
        let converged = delta
            .iter()
            .zip(&p)
            .all(|(d, v)| d.abs() <= TOLERANCE * v.abs().max(1e-12));
        p = trial;
        cost = trial_cost;
        lambda = (lambda / 10.0).max(1e-12);
        if converged {
            let fit = finish(p, cost, iteration);
            if !(fit.amplitude > 0.0 && fit.sigma > 0.0) {
                return Err(Error::Degenerate(format!(
                    "fit converged to a non-peaked shape (A = {}, σ = {})",
                    fit.amplitude, fit.sigma
                )));
            }
            return Ok(fit);
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITERATIONS,
        last: Box::new(finish(p, cost, MAX_ITERATIONS)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalCoherenceEstimate {
    pub fit: GaussianFit,
    /// Full width at half maximum of the fit, µm.
    pub fwhm: f64,
    /// Whether the fit was made to √τ rather than τ.
    pub fitted_sqrt: bool,
}

/// Fits a Gaussian to an axial transient (`√τ` when `use_sqrt`) and reports its FWHM.
pub fn temporal_coherence_length(
    positions: &[f64],
    tau: &[f64],
    use_sqrt: bool,
) -> Result<TemporalCoherenceEstimate> {
    if positions.len() != tau.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} positions for {} transient samples",
            positions.len(),
            tau.len()
        )));
    }
    let samples: Vec<(f64, f64)> = positions
        .iter()
        .zip(tau)
        .map(|(&l, &t)| (l, if use_sqrt { t.max(0.0).sqrt() } else { t }))
        .collect();
    let fit = fit_gaussian(&samples)?;
    Ok(TemporalCoherenceEstimate {
        fit,
        fwhm: fit.fwhm(),
        fitted_sqrt: use_sqrt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialCoherenceEstimate {
    /// Disk diameter, pixels (equivalent-area circle).
    pub diameter_px: f64,
    /// Δθ, rad.
    pub angular_extent: f64,
    /// L_S = 1/(κ̄Δθ), µm.
    pub spatial_length: f64,
}

/// Measures the solar disk in an infinity-focused image and converts its
/// angular size to a spatial coherence length.
///
/// The disk is every pixel at or above half the image maximum; its diameter is
/// that of the circle with the same area.
pub fn spatial_coherence_length(
    image: &[f64],
    focal_length: f64,
    pixel_pitch: f64,
    mean_wavenumber: f64,
) -> Result<SpatialCoherenceEstimate> {
    for (name, v) in [
        ("focal_length", focal_length),
        ("pixel_pitch", pixel_pitch),
        ("mean_wavenumber", mean_wavenumber),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::param(name, "must be positive"));
        }
    }
    let peak = image.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::NoDisk);
    }
    let half = peak / 2.0;
    let area = image.iter().filter(|&&v| v >= half).count() as f64;
    let diameter_px = 2.0 * (area / std::f64::consts::PI).sqrt();
    let angular_extent = diameter_px * pixel_pitch / focal_length;
    Ok(SpatialCoherenceEstimate {
        diameter_px,
        angular_extent,
        spatial_length: 1.0 / (mean_wavenumber * angular_extent),
    })
}

/// Renders a uniform disk of the given angular diameter as seen by a camera at
/// infinity focus, anti-aliased by `oversample²` sub-samples per pixel.
pub fn synthesize_sun_image(
    width: usize,
    height: usize,
    angular_diameter: f64,
    focal_length: f64,
    pixel_pitch: f64,
    oversample: usize,
) -> Vec<f64> {
    let radius_px = 0.5 * angular_diameter * focal_length / pixel_pitch;
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let n = oversample.max(1);
    let inv = 1.0 / n as f64;
    let mut img = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let mut hits = 0usize;
            for sy in 0..n {
                for sx in 0..n {
                    let px = x as f64 + (sx as f64 + 0.5) * inv - cx;
                    let py = y as f64 + (sy as f64 + 0.5) * inv - cy;
                    if px * px + py * py <= radius_px * radius_px {
                        hits += 1;
                    }
                }
            }
            img[y * width + x] = hits as f64 / (n * n) as f64;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_samples(a: f64, mu: f64, s: f64, b: f64) -> Vec<(f64, f64)> {
        (0..101)
            .map(|i| {
                let l = i as f64;
                (l, a * (-0.5 * ((l - mu) / s).powi(2)).exp() + b)
            })
            .collect()
    }

    #[test]
    fn exact_gaussian_recovered() {
        let fit = fit_gaussian(&gaussian_samples(1.0, 50.0, 10.0, 0.0)).unwrap();
        assert!((fit.amplitude - 1.0).abs() < 1e-6);
        assert!((fit.center - 50.0).abs() < 1e-6);
        assert!((fit.sigma - 10.0).abs() < 1e-6);
        assert!(fit.offset.abs() < 1e-6);
        assert!(fit.rms_residual < 1e-9);
    }

    #[test]
    fn fwhm_closed_form() {
        let fit = GaussianFit {
            amplitude: 1.0,
            center: 0.0,
            sigma: 10.0,
            offset: 0.0,
            rms_residual: 0.0,
            iterations: 0,
        };
        assert!((fit.fwhm() - 23.548_200_450_309_49).abs() < 1e-9);
    }

    #[test]
    fn noisy_gaussian_sigma_within_five_percent() {
        let noise = Normal::new(0.0, 0.01).unwrap();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<(f64, f64)> = gaussian_samples(1.0, 50.0, 10.0, 0.0)
                .into_iter()
                .map(|(l, v)| (l, v + noise.sample(&mut rng)))
                .collect();
            let fit = fit_gaussian(&samples).unwrap();
            assert!((fit.sigma - 10.0).abs() < 0.5, "seed {seed}: σ = {}", fit.sigma);
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            fit_gaussian(&[(0.0, 1.0), (1.0, 1.0), (2.0, 1.0), (3.0, 1.0), (4.0, 1.0)]),
            Err(Error::Degenerate(_))
        ));
        assert!(fit_gaussian(&[(0.0, 1.0), (1.0, 2.0)]).is_err());
        assert!(fit_gaussian(&[(0.0, f64::NAN), (1.0, 2.0), (2.0, 1.0), (3.0, 0.0), (4.0, 0.0)]).is_err());
    }

    #[test]
    fn sqrt_and_direct_paths() {
        let pos: Vec<f64> = (0..121).map(|i| i as f64).collect();
        let tau: Vec<f64> = pos.iter().map(|l| (-((l - 60.0) / 10.0).powi(2)).exp()).collect();
        let a = temporal_coherence_length(&pos, &tau, true).unwrap();
        assert!((a.fit.sigma - 10.0).abs() < 1e-6);
        let b = temporal_coherence_length(&pos, &tau, false).unwrap();
        assert!((b.fit.sigma - 10.0 / 2f64.sqrt()).abs() < 1e-6);
        assert!(temporal_coherence_length(&pos[1..], &tau, true).is_err());
    }

    #[test]
    fn sun_disk_size() {
        let f = 50_000.0;
        let pitch = 3.45;
        let angle = 0.57f64.to_radians();
        let img = synthesize_sun_image(200, 200, angle, f, pitch, 4);
        let est = spatial_coherence_length(&img, f, pitch, std::f64::consts::TAU / 0.55).unwrap();
        assert!((est.angular_extent / angle - 1.0).abs() < 0.02);

        let big = synthesize_sun_image(300, 300, 2.0 * angle, f, pitch, 4);
        let est2 = spatial_coherence_length(&big, f, pitch, std::f64::consts::TAU / 0.55).unwrap();
        assert!((est.spatial_length / est2.spatial_length - 2.0).abs() < 0.02);

        assert!(matches!(
            spatial_coherence_length(&[0.0; 100], f, pitch, 11.0),
            Err(Error::NoDisk)
        ));
    }

    proptest! {
        #[test]
        fn fit_is_shift_and_scale_equivariant(
            mu in 30.0f64..70.0,
            sigma in 4.0f64..15.0,
            shift in -1000.0f64..1000.0,
            alpha in 0.1f64..10.0,
        ) {
            let base = gaussian_samples(1.0, mu, sigma, 0.2);
            let fit = fit_gaussian(&base).unwrap();
            let moved: Vec<_> = base.iter().map(|&(l, v)| (l + shift, v)).collect();
            let fit_moved = fit_gaussian(&moved).unwrap();
            prop_assert!((fit_moved.center - fit.center - shift).abs() < 1e-9 * (1.0 + shift.abs()));
            prop_assert!((fit_moved.sigma - fit.sigma).abs() < 1e-9);
            prop_assert!((fit_moved.amplitude - fit.amplitude).abs() < 1e-9);

            let scaled: Vec<_> = base.iter().map(|&(l, v)| (l, v * alpha)).collect();
            let fit_scaled = fit_gaussian(&scaled).unwrap();
            prop_assert!((fit_scaled.amplitude - alpha * fit.amplitude).abs() < 1e-9 * alpha);
            prop_assert!((fit_scaled.offset - alpha * fit.offset).abs() < 1e-9 * alpha);
            prop_assert!((fit_scaled.center - fit.center).abs() < 1e-9);
            prop_assert!((fit_scaled.sigma - fit.sigma).abs() < 1e-9);
            prop_assert!((fit_scaled.fwhm() / fit_scaled.sigma - fwhm_per_sigma()).abs() < 1e-12);
        }
    }
}
