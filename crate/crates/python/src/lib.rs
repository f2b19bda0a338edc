//! Python bindings: `import sunif`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sunif_core::coherence::{self, GaussianFit};
use sunif_core::forward::{self, ImageStack, ScanConfig, SimulationMode};
use sunif_core::optics::{self, IlluminationModel};
use sunif_core::reconstruct::{self, DepthMap, TransientVolume};
use sunif_core::scene::{self, Scene, SceneKind, TestSceneParams};
use sunif_core::tracking::{self, TrackerConfig, TrackerState, TrackingReport};
use sunif_core::{io, Error};

create_exception!(sunif, TrackingLostError, PyRuntimeError);
create_exception!(sunif, FitError, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::TrackingLost { time, .. } => TrackingLostError::new_err(format!("tracking lost at t = {time} s")),
        e @ (Error::NoConvergence { .. } | Error::Degenerate(_)) => FitError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

type Res<T> = Result<T, PyErr>;

#[pyclass(name = "IlluminationModel", module = "sunif", frozen)]
struct PyIllumination {
    inner: IlluminationModel,
}

#[pymethods]
impl PyIllumination {
    /// Wavelength in µm, spectral bandwidth in rad/µm, angular extent in degrees.
    #[new]
    #[pyo3(signature = (wavelength = 0.55, spectral_bandwidth = 0.1, angular_bandwidth_deg = optics::SOLAR_ANGULAR_DIAMETER_DEG, spectral_samples = 201))]
    fn new(wavelength: f64, spectral_bandwidth: f64, angular_bandwidth_deg: f64, spectral_samples: usize) -> Res<Self> {
        let mut inner =
            IlluminationModel::from_wavelength(wavelength, spectral_bandwidth, angular_bandwidth_deg.to_radians())
                .map_err(to_py)?;
        inner.num_spectral_samples = spectral_samples;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn mean_wavenumber(&self) -> f64 {
        self.inner.mean_wavenumber
    }

    #[getter]
    fn spectral_bandwidth(&self) -> f64 {
        self.inner.spectral_bandwidth
    }

    #[getter]
    fn angular_bandwidth(&self) -> f64 {
        self.inner.angular_bandwidth
    }

    /// `(L_T, L_S)` in µm.
    fn coherence_lengths(&self) -> (f64, f64) {
        let c = self.inner.coherence_lengths();
        (c.temporal, c.spatial)
    }
}

#[pyclass(name = "Scene", module = "sunif", frozen)]
struct PyScene {
    inner: Scene,
}

#[pymethods]
impl PyScene {
    /// Builds a scene from a JSON scene description.
    #[staticmethod]
    fn from_json(text: &str) -> Res<Self> {
        Ok(Self {
            inner: scene::scene_from_json(text).map_err(to_py)?,
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.layers.len()
    }

    fn front_depth(&self) -> Vec<f64> {
        self.inner.front_depth().to_vec()
    }
}

/// One of `flat`, `step`, `ramp`, `two_layer_diffuser`, `checker_reflectance`.
#[pyfunction]
#[pyo3(signature = (kind, width = 64, height = 64, depth = 500.0, height_delta = 50.0, seed = 0))]
fn make_test_scene(kind: &str, width: usize, height: usize, depth: f64, height_delta: f64, seed: u64) -> Res<PyScene> {
    let kind: SceneKind = kind.parse().map_err(to_py)?;
    let params = TestSceneParams {
        width,
        height,
        depth,
        height_delta,
        seed,
        ..TestSceneParams::new(kind)
    };
    Ok(PyScene {
        inner: scene::make_test_scene(&params).map_err(to_py)?,
    })
}

#[pyclass(name = "ScanConfig", module = "sunif", frozen)]
struct PyScanConfig {
    inner: ScanConfig,
}

#[pymethods]
impl PyScanConfig {
    #[new]
    #[pyo3(signature = (start = 0.0, step = 5.0, frames = 1000, reference_amplitude = 1.0, ambient = 0.0, shot_noise = 0.0, vibration = 0.0, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        start: f64,
        step: f64,
        frames: usize,
        reference_amplitude: f64,
        ambient: f64,
        shot_noise: f64,
        vibration: f64,
        seed: u64,
    ) -> Res<Self> {
        let inner = ScanConfig {
            start,
            step,
            frames,
            reference_amplitude,
            ambient,
            shot_noise,
            vibration,
            seed,
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Scan covering the scene's depth range plus `margin` µm at `L_T/2` steps.
    #[staticmethod]
    #[pyo3(signature = (illumination, scene, margin = 50.0))]
    fn covering(illumination: &PyIllumination, scene: &PyScene, margin: f64) -> Self {
        let (lo, hi) = scene.inner.depth_range();
        Self {
            inner: ScanConfig::covering(&illumination.inner, lo, hi, margin),
        }
    }

    #[getter]
    fn start(&self) -> f64 {
        self.inner.start
    }

    #[getter]
    fn step(&self) -> f64 {
        self.inner.step
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames
    }
}

#[pyclass(name = "ImageStack", module = "sunif", frozen)]
struct PyImageStack {
    inner: ImageStack,
}

#[pymethods]
impl PyImageStack {
    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames
    }

    #[getter]
    fn positions(&self) -> Vec<f64> {
        self.inner.positions.clone()
    }

    /// Samples in frame-major order.
    fn data(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn get(&self, x: usize, y: usize, m: usize) -> Res<f64> {
        if x >= self.inner.width || y >= self.inner.height || m >= self.inner.frames {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.get(x, y, m))
    }

    fn save(&self, path: PathBuf) -> Res<()> {
        io::write_stack(&path, &self.inner).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> Res<Self> {
        Ok(Self {
            inner: io::read_stack(&path).map_err(to_py)?,
        })
    }
}

/// `mode` is `envelope` or `spectral_sum`.
#[pyfunction]
#[pyo3(signature = (scene, illumination, scan, mode = "envelope"))]
fn simulate_stack(py: Python<'_>, scene: &PyScene, illumination: &PyIllumination, scan: &PyScanConfig, mode: &str) -> Res<PyImageStack> {
    let mode: SimulationMode = mode.parse().map_err(to_py)?;
    let stack = py
        .detach(|| forward::simulate_stack(&scene.inner, &illumination.inner, &scan.inner, mode))
        .map_err(to_py)?;
    Ok(PyImageStack { inner: stack })
}

#[pyclass(name = "TransientVolume", module = "sunif", frozen)]
struct PyTransient {
    inner: TransientVolume,
}

#[pymethods]
impl PyTransient {
    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames
    }

    #[getter]
    fn positions(&self) -> Vec<f64> {
        self.inner.positions.clone()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn column(&self, x: usize, y: usize) -> Res<Vec<f64>> {
        if x >= self.inner.width || y >= self.inner.height {
            return Err(PyValueError::new_err("pixel out of range"));
        }
        Ok(self.inner.column(y * self.inner.width + x))
    }

    fn mean_profile(&self) -> Vec<f64> {
        self.inner.mean_profile()
    }
}

/// Window defaults to `⌈4·L_T/Δl⌉` frames using the given illumination.
#[pyfunction]
#[pyo3(signature = (stack, illumination = None, window = None, sigma = 2.0))]
fn reconstruct_transient(
    py: Python<'_>,
    stack: &PyImageStack,
    illumination: Option<&PyIllumination>,
    window: Option<usize>,
    sigma: f64,
) -> Res<PyTransient> {
    let s = &stack.inner;
    let window = window.unwrap_or_else(|| {
        let lt = illumination
            .map(|i| i.inner.coherence_lengths().temporal)
            .unwrap_or(optics::MEASURED_TEMPORAL_COHERENCE_UM);
        let step = s.positions.get(1).map_or(1.0, |p| p - s.positions[0]);
        reconstruct::default_window(lt, step).min(s.frames)
    });
    let tau = py
        .detach(|| reconstruct::reconstruct_transient(s, window, sigma))
        .map_err(to_py)?;
    Ok(PyTransient { inner: tau })
}

#[pyclass(name = "DepthMap", module = "sunif", frozen)]
struct PyDepthMap {
    inner: DepthMap,
}

#[pymethods]
impl PyDepthMap {
    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    /// Depth per pixel with NaN where invalid.
    fn depth(&self) -> Vec<f64> {
        self.inner.masked_depth()
    }

    fn confidence(&self) -> Vec<f64> {
        self.inner.confidence.clone()
    }

    fn valid(&self) -> Vec<bool> {
        self.inner.valid.clone()
    }

    fn valid_fraction(&self) -> f64 {
        self.inner.valid_fraction()
    }
}

#[pyfunction]
#[pyo3(signature = (tau, min_conf = 0.05, refine = false))]
fn extract_depth(tau: &PyTransient, min_conf: f64, refine: bool) -> Res<PyDepthMap> {
    Ok(PyDepthMap {
        inner: reconstruct::extract_depth(&tau.inner, min_conf, refine).map_err(to_py)?,
    })
}

/// Per pixel (row-major), a list of `(depth, amplitude)` sorted by depth.
#[pyfunction]
fn extract_peaks(tau: &PyTransient, threshold: f64, min_separation: f64) -> Res<Vec<Vec<(f64, f64)>>> {
    let list = reconstruct::extract_peaks(&tau.inner, threshold, min_separation).map_err(to_py)?;
    Ok(list
        .peaks
        .into_iter()
        .map(|p| p.into_iter().map(|q| (q.depth, q.amplitude)).collect())
        .collect())
}

#[pyclass(name = "GaussianFit", module = "sunif", frozen, get_all)]
struct PyGaussianFit {
    amplitude: f64,
    center: f64,
    sigma: f64,
    offset: f64,
    rms_residual: f64,
    iterations: usize,
    fwhm: f64,
}

impl From<GaussianFit> for PyGaussianFit {
    fn from(f: GaussianFit) -> Self {
        Self {
            amplitude: f.amplitude,
            center: f.center,
            sigma: f.sigma,
            offset: f.offset,
            rms_residual: f.rms_residual,
            iterations: f.iterations,
            fwhm: f.fwhm(),
        }
    }
}

#[pymethods]
impl PyGaussianFit {
    fn __repr__(&self) -> String {
        format!(
            "GaussianFit(amplitude={}, center={}, sigma={}, offset={}, fwhm={})",
            self.amplitude, self.center, self.sigma, self.offset, self.fwhm
        )
    }
}

#[pyfunction]
fn fit_gaussian(x: Vec<f64>, y: Vec<f64>) -> Res<PyGaussianFit> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err("x and y must have equal length"));
    }
    let samples: Vec<(f64, f64)> = x.into_iter().zip(y).collect();
    Ok(coherence::fit_gaussian(&samples).map_err(to_py)?.into())
}

/// Gaussian fit of an axial transient (of `√τ` by default).
#[pyfunction]
#[pyo3(signature = (positions, tau, use_sqrt = true))]
fn temporal_coherence_length(positions: Vec<f64>, tau: Vec<f64>, use_sqrt: bool) -> Res<PyGaussianFit> {
    let est = coherence::temporal_coherence_length(&positions, &tau, use_sqrt).map_err(to_py)?;
    Ok(est.fit.into())
}

/// `(angular_extent_rad, L_S_um)` of a solar disk image.
#[pyfunction]
fn spatial_coherence_length(image: Vec<f64>, focal_length: f64, pixel_pitch: f64, mean_wavenumber: f64) -> Res<(f64, f64)> {
    let est =
        coherence::spatial_coherence_length(&image, focal_length, pixel_pitch, mean_wavenumber).map_err(to_py)?;
    Ok((est.angular_extent, est.spatial_length))
}

#[pyfunction]
fn temporal_coherence(tau: f64, spectral_bandwidth: f64) -> Res<f64> {
    optics::temporal_coherence(tau, spectral_bandwidth).map_err(to_py)
}

#[pyfunction]
fn spatial_coherence(eps: f64, mean_wavenumber: f64, angular_bandwidth: f64) -> Res<f64> {
    optics::spatial_coherence(eps, mean_wavenumber, angular_bandwidth).map_err(to_py)
}

#[pyclass(name = "TrackingReport", module = "sunif", frozen)]
struct PyTrackingReport {
    inner: TrackingReport,
}

#[pymethods]
impl PyTrackingReport {
    #[getter]
    fn max_error(&self) -> f64 {
        self.inner.max_error
    }

    #[getter]
    fn steady_state_error(&self) -> f64 {
        self.inner.steady_state_error
    }

    #[getter]
    fn oscillating(&self) -> bool {
        self.inner.oscillating
    }

    /// Rows of `(t, err_az, err_alt, cmd_az, cmd_alt)`.
    fn trace(&self) -> Vec<(f64, f64, f64, f64, f64)> {
        self.inner
            .trace
            .iter()
            .map(|r| (r.t, r.err_az, r.err_alt, r.cmd_az, r.cmd_alt))
            .collect()
    }
}

/// Raises `TrackingLostError` when the Sun leaves the tracking camera's view.
#[pyfunction]
#[pyo3(signature = (duration = 600.0, recenter_every = tracking::DEFAULT_RECENTER_EVERY, gain = 0.5, min_step = tracking::DEFAULT_MIN_STEP, drift_rate = tracking::DEFAULT_DRIFT_RATE, sensing_noise = 0.0, quantize = true, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn run_tracking(
    duration: f64,
    recenter_every: usize,
    gain: f64,
    min_step: f64,
    drift_rate: f64,
    sensing_noise: f64,
    quantize: bool,
    seed: u64,
) -> Res<PyTrackingReport> {
    let mut cfg = TrackerConfig {
        gain,
        drift_rate,
        sensing_noise,
        quantize,
        seed,
        ..TrackerConfig::default()
    };
    cfg.azimuth.min_step = min_step;
    cfg.altitude.min_step = min_step;
    let mut state = TrackerState::new(cfg).map_err(to_py)?;
    let report = tracking::run_tracking(&mut state, duration, recenter_every).map_err(to_py)?;
    Ok(PyTrackingReport { inner: report })
}

#[pymodule]
fn sunif(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyIllumination>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyScanConfig>()?;
    m.add_class::<PyImageStack>()?;
    m.add_class::<PyTransient>()?;
    m.add_class::<PyDepthMap>()?;
    m.add_class::<PyGaussianFit>()?;
    m.add_class::<PyTrackingReport>()?;
    m.add_function(wrap_pyfunction!(make_test_scene, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_stack, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct_transient, m)?)?;
    m.add_function(wrap_pyfunction!(extract_depth, m)?)?;
    m.add_function(wrap_pyfunction!(extract_peaks, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_coherence_length, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_coherence_length, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_coherence, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_coherence, m)?)?;
    m.add_function(wrap_pyfunction!(run_tracking, m)?)?;
    m.add("TrackingLostError", m.py().get_type::<TrackingLostError>())?;
    m.add("FitError", m.py().get_type::<FitError>())?;
    Ok(())
}
