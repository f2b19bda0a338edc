//! Forward model: synthesizes the intensity stack `I(x, l_m)` seen by the
//! camera while the reference mirror steps through the scan.
//!
//! Each frame is `b + 2·Re{c}` where `b = |u_s|²(1 + β) + r²` is the
//! interference-free image and `c` the correlation between scene and reference
//! fields. `c` is computed either from the closed-form Gaussian envelope or by
//! explicitly summing monochromatic fringes over a sampled spectrum.

use std::str::FromStr;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{coherence_lengths, sample_spectrum, temporal_weight, IlluminationModel};
use crate::reconstruct::TransientVolume;
use crate::scene::{mix_seed, PathResponse, Scene};

/// Paths further than this many `L_T` from the reference are skipped in
/// envelope mode (their weight is below e^-32).
const ENVELOPE_CUTOFF: f64 = 8.0;

/// Stream tag for the per-frame vibration jitter, disjoint from pixel streams.
const VIBRATION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    /// l_1, µm.
    pub start: f64,
    /// Δl, µm.
    pub step: f64,
    /// M.
    pub frames: usize,
    /// Reference field amplitude r.
    pub reference_amplitude: f64,
    /// β: ambient light as a fraction of the scene-arm intensity.
    pub ambient: f64,
    /// Shot noise scale; per-frame std is `shot_noise·√I`.
    pub shot_noise: f64,
    /// Std of the per-frame global axial jitter, µm.
    pub vibration: f64,
    pub seed: u64,
}

impl Default for ScanConfig {
    /// 1000 frames at 5 µm steps, noiseless.
    fn default() -> Self {
        Self {
            start: 0.0,
            step: 5.0,
            frames: 1000,
            reference_amplitude: 1.0,
            ambient: 0.0,
            shot_noise: 0.0,
            vibration: 0.0,
            seed: 0,
        }
    }
}

impl ScanConfig {
    /// Scan of depth range `[lo, hi]` padded by `margin` on each side, stepping
    /// `L_T/2` with `M = ⌈2D/L_T⌉` frames.
    pub fn covering(illum: &IlluminationModel, lo: f64, hi: f64, margin: f64) -> Self {
        let lt = coherence_lengths(illum).temporal;
        let start = lo - margin;
        let range = (hi + margin) - start;
        Self {
            start,
            step: lt / 2.0,
            frames: ((2.0 * range / lt).ceil() as usize).max(1) + 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::param("frames", "at least one frame is required"));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::param("step", "must be positive"));
        }
        if !self.start.is_finite() {
            return Err(Error::NonFinite("start"));
        }
        for (name, v) in [
            ("reference_amplitude", self.reference_amplitude),
            ("ambient", self.ambient),
            ("shot_noise", self.shot_noise),
            ("vibration", self.vibration),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(name, "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.frames).map(|m| self.position(m)).collect()
    }

    pub fn position(&self, m: usize) -> f64 {
        self.start + m as f64 * self.step
    }

    /// Copy with shot noise and vibration disabled.
    pub fn noiseless(&self) -> Self {
        Self {
            shot_noise: 0.0,
            vibration: 0.0,
            ..self.clone()
        }
    }
}

/// A `W×H×M` stack of intensity frames, stored frame-major (`[m][y][x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Nominal axial positions l_m, µm, strictly increasing.
    pub positions: Vec<f64>,
    pub data: Vec<f64>,
}

impl ImageStack {
    pub fn new(width: usize, height: usize, positions: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        let frames = positions.len();
        if width == 0 || height == 0 || frames == 0 {
            return Err(Error::Empty("image stack"));
        }
        if data.len() != width * height * frames {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height}x{frames} stack",
                data.len()
            )));
        }
        if positions.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::param("positions", "must be strictly increasing"));
        }
        Ok(Self {
            width,
            height,
            frames,
            positions,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn frame(&self, m: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.data[m * n..(m + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, m: usize) -> f64 {
        self.data[m * self.pixel_count() + y * self.width + x]
    }

    /// Intensity profile of one pixel along the scan.
    pub fn column(&self, i: usize) -> Vec<f64> {
        let n = self.pixel_count();
        (0..self.frames).map(|m| self.data[m * n + i]).collect()
    }

    pub(crate) fn same_grid(&self, other_w: usize, other_h: usize, other_m: usize) -> bool {
        self.width == other_w && self.height == other_h && self.frames == other_m
    }
}

/// Frame-major buffer from per-pixel columns.
pub(crate) fn transpose_columns(columns: &[Vec<f64>], frames: usize) -> Vec<f64> {
    let n = columns.len();
    let mut data = vec![0.0; n * frames];
    for (i, col) in columns.iter().enumerate() {
        for (m, v) in col.iter().enumerate() {
            data[m * n + i] = *v;
        }
    }
    data
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationMode {
    /// Closed-form Gaussian coherence envelope times the mean-wavenumber carrier.
    #[default]
    Envelope,
    /// Weighted sum of monochromatic fringes over the sampled spectrum.
    SpectralSum,
}

impl FromStr for SimulationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "envelope" => Ok(SimulationMode::Envelope),
            "spectral_sum" | "spectral-sum" => Ok(SimulationMode::SpectralSum),
            other => Err(Error::Unknown {
                what: "simulation mode",
                name: other.to_string(),
            }),
        }
    }
}

/// All paths (direct layers, then indirect taps) reaching pixel `i`.
fn pixel_paths(scene: &Scene, illum: &IlluminationModel, i: usize) -> Vec<PathResponse> {
    let mut paths = scene.diagonal_at(i);
    paths.extend(scene.indirect_paths(i, coherence_lengths(illum).spatial));
    paths
}

/// Envelope-mode correlation `c` for a set of paths at reference position `l`.
fn envelope_correlation(paths: &[PathResponse], illum: &IlluminationModel, r: f64, l: f64) -> Complex64 {
    let cutoff = ENVELOPE_CUTOFF / illum.spectral_bandwidth;
    paths
        .iter()
        .filter(|p| (p.depth - l).abs() <= cutoff)
        .map(|p| {
            let delay = p.depth - l;
            let gate = temporal_weight(delay, illum.spectral_bandwidth);
            p.amplitude * Complex64::from_polar(r * gate, illum.mean_wavenumber * delay)
        })
        .sum()
}

/// Spectral-sum correlation: Σ_p A_p Σ_j w_j e^{iκ_j (D_p − l)}.
fn spectral_correlation(
    paths: &[PathResponse],
    wavenumbers: &[f64],
    weights: &[f64],
    r: f64,
    l: f64,
) -> Complex64 {
    let k0 = wavenumbers[0];
    let dk = if wavenumbers.len() > 1 {
        wavenumbers[1] - wavenumbers[0]
    } else {
        0.0
    };
    let mut total = Complex64::new(0.0, 0.0);
    for p in paths {
        let delay = p.depth - l;
        // e^{iκ_j Δ} by rotation from κ_0; drift over a few hundred samples is ~1e-14
        let rot = Complex64::from_polar(1.0, dk * delay);
        let mut phasor = Complex64::from_polar(1.0, k0 * delay);
        let mut acc = Complex64::new(0.0, 0.0);
        for &w in weights {
            acc += phasor * w;
            phasor *= rot;
        }
        total += p.amplitude * acc;
    }
    total * r
}

/// Closed-form correlation `c(x, l)` at pixel `(x, y)` (envelope model).
pub fn correlation(
    scene: &Scene,
    illum: &IlluminationModel,
    reference_amplitude: f64,
    x: usize,
    y: usize,
    l: f64,
) -> Result<Complex64> {
    scene.diagonal_response(x, y)?;
    let paths = pixel_paths(scene, illum, y * scene.width + x);
    Ok(envelope_correlation(&paths, illum, reference_amplitude, l))
}

fn interference_free(scene: &Scene, cfg: &ScanConfig, i: usize) -> f64 {
    scene.scene_intensity(i) * (1.0 + cfg.ambient) + cfg.reference_amplitude.powi(2)
}

fn vibration_offsets(cfg: &ScanConfig) -> Vec<f64> {
    if cfg.vibration == 0.0 {
        return vec![0.0; cfg.frames];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, VIBRATION_STREAM));
    (0..cfg.frames)
        .map(|_| {
            let n: f64 = StandardNormal.sample(&mut rng);
            cfg.vibration * n
        })
        .collect()
}

/// Synthesizes the full axial scan.
///
/// Pixels are processed in parallel on the current rayon pool. Noise is drawn
/// from one stream per pixel (keyed by seed and pixel index, frames in order)
/// and vibration from one global per-frame stream, so the output does not
/// depend on the number of worker threads.
pub fn simulate_stack(
    scene: &Scene,
    illum: &IlluminationModel,
    cfg: &ScanConfig,
    mode: SimulationMode,
) -> Result<ImageStack> {
    scene.validate()?;
    illum.validate()?;
    cfg.validate()?;
    let spectrum = match mode {
        SimulationMode::Envelope => None,
        SimulationMode::SpectralSum => {
            if illum.num_spectral_samples < 3 {
                return Err(Error::param(
                    "num_spectral_samples",
                    "spectral summation needs at least 3 samples",
                ));
            }
            let s = sample_spectrum(illum, illum.num_spectral_samples)?;
            Some((
                s.iter().map(|s| s.wavenumber).collect::<Vec<_>>(),
                s.iter().map(|s| s.weight).collect::<Vec<_>>(),
            ))
        }
    };
    let positions = cfg.positions();
    let jitter = vibration_offsets(cfg);
    let r = cfg.reference_amplitude;

    let columns: Vec<Vec<f64>> = (0..scene.pixel_count())
        .into_par_iter()
        .map(|i| {
            let paths = pixel_paths(scene, illum, i);
            let b = interference_free(scene, cfg, i);
            let mut rng = (cfg.shot_noise > 0.0).then(|| ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, i as u64)));
            positions
                .iter()
                .zip(&jitter)
                .map(|(&l, &dl)| {
                    let l = l + dl;
                    let c = match &spectrum {
                        None => envelope_correlation(&paths, illum, r, l),
                        Some((k, w)) => spectral_correlation(&paths, k, w, r, l),
                    };
                    let mut v = b + 2.0 * c.re;
                    if let Some(rng) = rng.as_mut() {
                        let n: f64 = StandardNormal.sample(rng);
                        v += cfg.shot_noise * v.max(0.0).sqrt() * n;
                    }
                    v.max(0.0)
                })
                .collect()
        })
        .collect();

    ImageStack::new(
        scene.width,
        scene.height,
        positions,
        transpose_columns(&columns, cfg.frames),
    )
}

/// Four noiseless frames at reference shifts of a quarter carrier period.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseShiftQuad {
    pub width: usize,
    pub height: usize,
    /// Reference positions of the four frames, µm.
    pub positions: [f64; 4],
    pub frames: [Vec<f64>; 4],
}

impl PhaseShiftQuad {
    /// `√((I₀−I₂)² + (I₁−I₃)²)/2` per pixel, which equals `2|c|`.
    pub fn amplitude(&self) -> Vec<f64> {
        let [i0, i1, i2, i3] = &self.frames;
        (0..i0.len())
            .map(|p| (i0[p] - i2[p]).hypot(i1[p] - i3[p]) / 2.0)
            .collect()
    }
}

/// Phase-shifting acquisition around frame `m` of the scan.
///
/// The reference is stepped by `λ̄/4` between frames, a carrier phase step of
/// π/2. The coherence envelope is held at its value at `l_m` (an ideal phase
/// shifter), so the four-bucket identity holds exactly. Noise, ambient jitter
/// and vibration settings in `cfg` are ignored.
pub fn simulate_phase_shift_quad(
    scene: &Scene,
    illum: &IlluminationModel,
    cfg: &ScanConfig,
    m: usize,
) -> Result<PhaseShiftQuad> {
    scene.validate()?;
    illum.validate()?;
    cfg.validate()?;
    if m >= cfg.frames {
        return Err(Error::param("m", format!("frame {m} outside a {}-frame scan", cfg.frames)));
    }
    let l = cfg.position(m);
    let quarter = illum.mean_wavelength() / 4.0;
    let r = cfg.reference_amplitude;
    let per_pixel: Vec<[f64; 4]> = (0..scene.pixel_count())
        .into_par_iter()
        .map(|i| {
            let c = envelope_correlation(&pixel_paths(scene, illum, i), illum, r, l);
            let b = interference_free(scene, cfg, i);
            // shifting the reference by kλ̄/4 rotates the carrier by −kπ/2
            let rotated = [c, c * Complex64::new(0.0, -1.0), -c, c * Complex64::new(0.0, 1.0)];
            rotated.map(|ck| (b + 2.0 * ck.re).max(0.0))
        })
        .collect();
    let frames = std::array::from_fn(|k| per_pixel.iter().map(|v| v[k]).collect());
    Ok(PhaseShiftQuad {
        width: scene.width,
        height: scene.height,
        positions: std::array::from_fn(|k| l + k as f64 * quarter),
        frames,
    })
}

/// Transient `|c|²` at every scan position measured by four-bucket phase
/// shifting, for use as a reference against the blur-based estimator.
pub fn phase_shift_transient(
    scene: &Scene,
    illum: &IlluminationModel,
    cfg: &ScanConfig,
) -> Result<TransientVolume> {
    cfg.validate()?;
    let n = scene.pixel_count();
    let mut data = Vec::with_capacity(n * cfg.frames);
    for m in 0..cfg.frames {
        let quad = simulate_phase_shift_quad(scene, illum, cfg, m)?;
        data.extend(quad.amplitude().into_iter().map(|a| (a / 2.0).powi(2)));
    }
    TransientVolume::new(scene.width, scene.height, cfg.positions(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_test_scene, SceneKind, SurfaceLayer, TestSceneParams};
    use std::f64::consts::TAU;

    fn illum() -> IlluminationModel {
        IlluminationModel::new(TAU / 0.55, 0.1, 0.0, 201).unwrap()
    }

    fn mirror(w: usize, h: usize, d: f64) -> Scene {
        Scene::new(w, h, 3.7, vec![SurfaceLayer::uniform(w, h, d, 1.0)], None).unwrap()
    }

    fn at(l: f64, frames: usize, step: f64) -> ScanConfig {
        ScanConfig {
            start: l,
            step,
            frames,
            ..ScanConfig::default()
        }
    }

    #[test]
    fn zero_delay_is_fully_constructive() {
        let s = simulate_stack(&mirror(2, 2, 500.0), &illum(), &at(500.0, 1, 5.0), SimulationMode::Envelope).unwrap();
        assert!(s.data.iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn three_coherence_lengths_out_is_nearly_flat() {
        let il = illum();
        let s = simulate_stack(&mirror(1, 1, 500.0), &il, &at(530.0, 1, 5.0), SimulationMode::Envelope).unwrap();
        assert!((s.data[0] - 2.0).abs() <= 2.0 * (-4.5f64).exp() + 1e-15);
    }

    #[test]
    fn envelope_matches_spectral_sum() {
        let il = illum();
        let cfg = at(470.0, 61, 1.0);
        let a = simulate_stack(&mirror(2, 1, 500.0), &il, &cfg, SimulationMode::Envelope).unwrap();
        let b = simulate_stack(&mirror(2, 1, 500.0), &il, &cfg, SimulationMode::SpectralSum).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-3 * x.abs());
        }
    }

    #[test]
    fn spectral_mode_needs_three_samples() {
        let il = IlluminationModel::new(TAU / 0.55, 0.1, 0.0, 2).unwrap();
        assert!(simulate_stack(&mirror(1, 1, 0.0), &il, &at(0.0, 2, 1.0), SimulationMode::SpectralSum).is_err());
        assert!("fourier".parse::<SimulationMode>().is_err());
    }

    #[test]
    fn no_reference_means_no_interference() {
        let scene = make_test_scene(&TestSceneParams { width: 8, height: 8, ..TestSceneParams::new(SceneKind::Ramp) }).unwrap();
        let cfg = ScanConfig {
            reference_amplitude: 0.0,
            ..at(480.0, 40, 2.5)
        };
        let s = simulate_stack(&scene, &illum(), &cfg, SimulationMode::Envelope).unwrap();
        for i in 0..64 {
            let col = s.column(i);
            assert!(col.iter().all(|&v| v == col[0]));
        }
    }

    #[test]
    fn quad_on_mirror_and_dark_scene() {
        let il = illum();
        let q = simulate_phase_shift_quad(&mirror(2, 2, 500.0), &il, &at(500.0, 1, 5.0), 0).unwrap();
        assert!(q.amplitude().iter().all(|&a| (a - 2.0).abs() < 1e-12));
        assert!((q.positions[1] - q.positions[0] - il.mean_wavelength() / 4.0).abs() < 1e-12);

        let dark = Scene::new(2, 2, 1.0, vec![SurfaceLayer::uniform(2, 2, 500.0, 0.0)], None).unwrap();
        let q = simulate_phase_shift_quad(&dark, &il, &at(500.0, 1, 5.0), 0).unwrap();
        assert!(q.frames.iter().all(|f| f == &q.frames[0]));
        assert!(q.amplitude().iter().all(|&a| a == 0.0));
        assert!(simulate_phase_shift_quad(&dark, &il, &at(500.0, 1, 5.0), 1).is_err());
    }

    #[test]
    fn quad_matches_closed_form_on_random_scenes() {
        let il = IlluminationModel::new(TAU / 0.55, 0.1, 0.004, 201).unwrap();
        for seed in 0..5 {
            let mut p = TestSceneParams::new(SceneKind::TwoLayerDiffuser);
            p.width = 6;
            p.height = 5;
            p.gap = 12.0 + seed as f64;
            p.seed = seed;
            p.indirect = Some(crate::scene::IndirectKernel::new(vec![crate::scene::KernelTap {
                dx: 1,
                dy: 1,
                weight: 0.2,
                extra_path: 3.0,
            }]).unwrap());
            let scene = make_test_scene(&p).unwrap();
            let cfg = ScanConfig { ambient: 0.3, ..at(490.0, 30, 1.3) };
            for m in [0, 7, 11, 20] {
                let q = simulate_phase_shift_quad(&scene, &il, &cfg, m).unwrap();
                let amp = q.amplitude();
                for y in 0..scene.height {
                    for x in 0..scene.width {
                        let c = correlation(&scene, &il, 1.0, x, y, cfg.position(m)).unwrap();
                        let est = amp[y * scene.width + x] / 2.0;
                        if c.norm() > 1e-6 {
                            assert!((est - c.norm()).abs() / c.norm() < 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn determinism_and_thread_independence() {
        let mut p = TestSceneParams::new(SceneKind::Step);
        p.width = 12;
        p.height = 10;
        let scene = make_test_scene(&p).unwrap();
        let cfg = ScanConfig {
            shot_noise: 0.05,
            vibration: 0.3,
            seed: 9,
            ..ScanConfig::covering(&illum(), 450.0, 500.0, 20.0)
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_stack(&scene, &illum(), &cfg, SimulationMode::Envelope).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.data.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn stack_validation() {
        assert!(ImageStack::new(2, 2, vec![0.0, 1.0], vec![0.0; 7]).is_err());
        assert!(ImageStack::new(1, 1, vec![1.0, 1.0], vec![0.0; 2]).is_err());
        assert!(ScanConfig { frames: 0, ..ScanConfig::default() }.validate().is_err());
        assert!(ScanConfig { step: 0.0, ..ScanConfig::default() }.validate().is_err());
        assert!(ScanConfig { ambient: -1.0, ..ScanConfig::default() }.validate().is_err());
    }

    #[test]
    fn oracle_envelope_is_symmetric_about_surface() {
        let il = illum();
        let d = 500.0;
        let cfg = at(d - 30.0, 61, 1.0);
        let scene = mirror(1, 1, d);
        let amp: Vec<f64> = (0..61)
            .map(|m| simulate_phase_shift_quad(&scene, &il, &cfg, m).unwrap().amplitude()[0])
            .collect();
        for k in 0..30 {
            assert!((amp[30 - k] - amp[30 + k]).abs() < 1e-9, "offset {k}");
        }
    }

    #[test]
    fn mean_intensity_is_independent_of_speckle() {
        let il = illum();
        let mean = |seed| {
            let scene = make_test_scene(&TestSceneParams { width: 32, height: 32, seed, ..TestSceneParams::new(SceneKind::Flat) }).unwrap();
            let s = simulate_stack(&scene, &il, &ScanConfig::covering(&il, 500.0, 500.0, 100.0), SimulationMode::Envelope).unwrap();
            s.data.iter().sum::<f64>() / s.data.len() as f64
        };
        let (a, b) = (mean(1), mean(2));
        assert!((a - b).abs() / a < 1e-2, "{a} vs {b}");
    }

    #[test]
    fn covering_scan_uses_half_coherence_steps() {
        let cfg = ScanConfig::covering(&illum(), 0.0, 100.0, 0.0);
        assert_eq!(cfg.step, 5.0);
        assert_eq!(cfg.frames, 21);
    }
}
