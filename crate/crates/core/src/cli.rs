//! The `sunif` command-line tool.
//!
//! Every subcommand computes all of its outputs in memory before writing any
//! of them, so a failing run leaves no partial files behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::coherence::{spatial_coherence_length, temporal_coherence_length};
use crate::error::Error;
use crate::forward::{simulate_stack, ImageStack, ScanConfig, SimulationMode};
use crate::io::{self, Report};
use crate::optics::{IlluminationModel, SOLAR_ANGULAR_DIAMETER_DEG};
use crate::reconstruct::{
    default_window, extract_depth_with, extract_peaks, reconstruct_transient, DepthOptions, TransientVolume,
};
use crate::scene::{make_test_scene, scene_from_json, SceneKind, TestSceneParams};
use crate::tracking::{run_tracking, TrackerConfig, TrackerState, TrackingReport, DEFAULT_RECENTER_EVERY};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "sunif", version, about = "Passive sunlight interferometry simulator and reconstructor")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; affects speed only.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct IllumArgs {
    /// Mean wavelength, µm.
    #[arg(long, default_value_t = 0.55)]
    pub wavelength: f64,
    /// Spectral bandwidth Δκ, rad/µm.
    #[arg(long, default_value_t = 0.1)]
    pub spectral_bandwidth: f64,
    /// Angular extent of the source Δθ, degrees.
    #[arg(long, default_value_t = SOLAR_ANGULAR_DIAMETER_DEG)]
    pub angular_bandwidth_deg: f64,
    /// Samples for spectral-sum simulation.
    #[arg(long, default_value_t = 201)]
    pub spectral_samples: usize,
}

impl IllumArgs {
    fn model(&self) -> crate::Result<IlluminationModel> {
        let mut m = IlluminationModel::from_wavelength(
            self.wavelength,
            self.spectral_bandwidth,
            self.angular_bandwidth_deg.to_radians(),
        )?;
        m.num_spectral_samples = self.spectral_samples;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Args, Clone)]
pub struct PipelineArgs {
    /// Moving-average window N, frames (default ⌈4·L_T/Δl⌉).
    #[arg(long)]
    pub window: Option<usize>,
    /// Lateral blur standard deviation, pixels.
    #[arg(long, default_value_t = 2.0)]
    pub sigma: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize an axial scan of a scene.
    Simulate(SimulateArgs),
    /// Recover transient, depth and confidence from a scan.
    Reconstruct(ReconstructArgs),
    /// Estimate coherence lengths.
    #[command(subcommand)]
    Coherence(CoherenceCommand),
    /// Simulate the closed-loop Sun tracker.
    Track(TrackArgs),
    /// Extract multiple surfaces per pixel.
    Peaks(PeaksArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scene description (JSON).
    #[arg(long, conflicts_with = "kind", required_unless_present = "kind")]
    pub scene: Option<PathBuf>,
    /// Built-in scene with default parameters instead of a scene file.
    #[arg(long)]
    pub kind: Option<String>,
    /// Scan configuration (JSON); individual flags override it.
    #[arg(long)]
    pub scan: Option<PathBuf>,
    #[arg(long, default_value = "stack.sif")]
    pub out: PathBuf,
    /// Ground-truth front-surface depth raster.
    #[arg(long, default_value = "truth.sdm")]
    pub truth: PathBuf,
    /// First axial position, µm (default: middle frame at the scene's mid depth).
    #[arg(long)]
    pub start: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub reference: Option<f64>,
    #[arg(long)]
    pub ambient: Option<f64>,
    #[arg(long)]
    pub shot_noise: Option<f64>,
    #[arg(long)]
    pub vibration: Option<f64>,
    /// `envelope` or `spectral_sum`.
    #[arg(long, default_value = "envelope")]
    pub mode: String,
    #[command(flatten)]
    pub illum: IllumArgs,
}

/// `--export-transient every=K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExportEvery(pub usize);

impl FromStr for ExportEvery {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let v = s.strip_prefix("every=").unwrap_or(s);
        match v.parse::<usize>() {
            Ok(k) if k > 0 => Ok(ExportEvery(k)),
            _ => Err(format!("expected every=K with K > 0, got `{s}`")),
        }
    }
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub stack: PathBuf,
    #[arg(long, default_value = "depth.sdm")]
    pub depth_out: PathBuf,
    #[arg(long, default_value = "confidence.sdm")]
    pub confidence_out: PathBuf,
    #[arg(long, default_value = "reconstruct.txt")]
    pub report: PathBuf,
    /// Minimum peak τ as a fraction of the global maximum.
    #[arg(long, default_value_t = 0.05)]
    pub min_confidence: f64,
    /// Minimum ratio of a pixel's peak to the median of its transient (0 disables).
    #[arg(long, default_value_t = 0.0)]
    pub min_contrast: f64,
    /// Sub-bin parabolic peak refinement.
    #[arg(long)]
    pub refine: bool,
    /// Write every K-th transient slice as 16-bit PNG.
    #[arg(long)]
    pub export_transient: Option<ExportEvery>,
    /// Colorized depth preview PNG.
    #[arg(long)]
    pub preview: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub illum: IllumArgs,
}

#[derive(Debug, Subcommand)]
pub enum CoherenceCommand {
    /// Fit the axial transient of a scan.
    Temporal(TemporalArgs),
    /// Measure the solar disk in an infinity-focused image.
    Spatial(SpatialArgs),
}

#[derive(Debug, Args)]
pub struct TemporalArgs {
    #[arg(long)]
    pub stack: PathBuf,
    /// Fit τ itself rather than √τ.
    #[arg(long)]
    pub no_sqrt: bool,
    #[arg(long, default_value = "coherence.txt")]
    pub report: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub illum: IllumArgs,
}

#[derive(Debug, Args)]
pub struct SpatialArgs {
    /// Grayscale PNG.
    #[arg(long)]
    pub image: PathBuf,
    /// Focal length, µm.
    #[arg(long)]
    pub focal_length: f64,
    /// Pixel pitch, µm.
    #[arg(long)]
    pub pixel_pitch: f64,
    /// Mean wavelength, µm.
    #[arg(long, default_value_t = 0.55)]
    pub wavelength: f64,
    #[arg(long, default_value = "coherence.txt")]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Tracker configuration (JSON); individual flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Simulated time, s.
    #[arg(long, default_value_t = 600.0)]
    pub duration: f64,
    #[arg(long, default_value_t = DEFAULT_RECENTER_EVERY)]
    pub recenter_every: usize,
    #[arg(long)]
    pub gain: Option<f64>,
    /// Minimum stage increment, degrees.
    #[arg(long)]
    pub min_step: Option<f64>,
    /// Sun drift, degrees/s.
    #[arg(long)]
    pub drift_rate: Option<f64>,
    #[arg(long)]
    pub sensing_noise: Option<f64>,
    #[arg(long)]
    pub no_quantize: bool,
    #[arg(long, default_value = "trace.csv")]
    pub trace: PathBuf,
    #[arg(long, default_value = "track.txt")]
    pub summary: PathBuf,
}

#[derive(Debug, Args)]
pub struct PeaksArgs {
    #[arg(long)]
    pub stack: PathBuf,
    /// Peak threshold as a fraction of each pixel's maximum.
    #[arg(long, default_value_t = 0.2)]
    pub threshold: f64,
    /// Minimum separation between peaks, µm (default 4·L_T).
    #[arg(long)]
    pub min_separation: Option<f64>,
    /// One `x,y,depth,amplitude` row per peak.
    #[arg(long, default_value = "peaks.csv")]
    pub out: PathBuf,
    #[arg(long, default_value = "peaks.txt")]
    pub report: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub illum: IllumArgs,
}

/// A failed run: message for standard error plus process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

/// Maps library errors onto the exit-code contract.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter { .. } | Error::Config(_) | Error::Unknown { .. } => EXIT_USAGE,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        Error::Io(_)
        | Error::Format(_)
        | Error::DimensionMismatch(_)
        | Error::Empty(_)
        | Error::OutOfBounds { .. }
        | Error::NoDisk => EXIT_DATA,
        Error::NonFinite(_) | Error::Degenerate(_) | Error::NoConvergence { .. } | Error::TrackingLost { .. } => {
            EXIT_NUMERICAL
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = read_input(path)?;
    serde_json::from_slice(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Outputs collected by a subcommand, written together at the end.
struct Outputs {
    dir: PathBuf,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, path: &Path, bytes: Vec<u8>) {
        self.files.push((self.dir.join(path), bytes));
    }

    fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        fs::create_dir_all(&self.dir).map_err(|e| CliError::from(Error::Io(e)))?;
        let mut written = Vec::with_capacity(self.files.len());
        for (path, bytes) in self.files {
            io::atomic_write(&path, &bytes)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Parses arguments and runs the selected subcommand on a pool of the
/// requested size.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| usage(e.to_string()))?;
    let common = &cli.common;
    let outputs = pool.install(|| match &cli.command {
        Command::Simulate(a) => simulate(common, a),
        Command::Reconstruct(a) => reconstruct(common, a),
        Command::Coherence(CoherenceCommand::Temporal(a)) => temporal(common, a),
        Command::Coherence(CoherenceCommand::Spatial(a)) => spatial(common, a),
        Command::Track(a) => track(common, a),
        Command::Peaks(a) => peaks(common, a),
    })?;
    outputs.commit()
}

fn simulate(common: &CommonArgs, a: &SimulateArgs) -> Result<Outputs, CliError> {
    let scene = match (&a.scene, &a.kind) {
        (Some(path), _) => {
            let text = String::from_utf8(read_input(path)?)
                .map_err(|_| usage(format!("{} is not UTF-8", path.display())))?;
            scene_from_json(&text)?
        }
        (None, Some(kind)) => make_test_scene(&TestSceneParams::new(kind.parse::<SceneKind>()?))?,
        (None, None) => return Err(usage("one of --scene or --kind is required")),
    };
    let illum = a.illum.model()?;
    let mode: SimulationMode = a.mode.parse()?;
    let mut cfg = match &a.scan {
        Some(path) => read_json::<ScanConfig>(path)?,
        None => ScanConfig::default(),
    };
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut cfg.step, a.step);
    set(&mut cfg.reference_amplitude, a.reference);
    set(&mut cfg.ambient, a.ambient);
    set(&mut cfg.shot_noise, a.shot_noise);
    set(&mut cfg.vibration, a.vibration);
    if let Some(m) = a.frames {
        cfg.frames = m;
    }
    cfg.seed = common.seed;
    cfg.validate()?;
    cfg.start = match (a.start, &a.scan) {
        (Some(s), _) => s,
        (None, Some(_)) => cfg.start,
        (None, None) => {
            let (lo, hi) = scene.depth_range();
            // the middle frame lands exactly on the scene's mid depth
            0.5 * (lo + hi) - cfg.step * ((cfg.frames - 1) / 2) as f64
        }
    };
    let stack = simulate_stack(&scene, &illum, &cfg, mode)?;
    let mut out = Outputs::new(&common.out_dir);
    out.add(&a.out, io::encode_stack(&stack)?);
    out.add(&a.truth, io::encode_depth(scene.width, scene.height, scene.front_depth())?);
    Ok(out)
}

fn load_transient(path: &Path, pipeline: &PipelineArgs, illum: &IllumArgs) -> Result<(ImageStack, TransientVolume, usize), CliError> {
    let stack = io::decode_stack(&read_input(path)?)?;
    let illum = illum.model()?;
    let step = stack.positions.get(1).map_or(1.0, |p| p - stack.positions[0]);
    let window = pipeline
        .window
        .unwrap_or_else(|| default_window(illum.coherence_lengths().temporal, step).min(stack.frames));
    let tau = reconstruct_transient(&stack, window, pipeline.sigma)?;
    Ok((stack, tau, window))
}

fn reconstruct(common: &CommonArgs, a: &ReconstructArgs) -> Result<Outputs, CliError> {
    let (stack, tau, window) = load_transient(&a.stack, &a.pipeline, &a.illum)?;
    let opts = DepthOptions {
        min_conf: a.min_confidence,
        min_contrast: a.min_contrast,
        refine: a.refine,
    };
    let depth = extract_depth_with(&tau, &opts)?;
    let mut out = Outputs::new(&common.out_dir);
    out.add(&a.depth_out, io::encode_depth(depth.width, depth.height, &depth.masked_depth())?);
    out.add(&a.confidence_out, io::encode_depth(depth.width, depth.height, &depth.confidence)?);
    let mut slices = 0;
    if let Some(ExportEvery(every)) = a.export_transient {
        let max = tau.max();
        for m in io::slice_indices(tau.frames, every) {
            let name = PathBuf::from(format!("transient_{m:05}.png"));
            out.add(&name, io::encode_slice_png(tau.frame(m), tau.width, tau.height, max)?);
            slices += 1;
        }
    }
    if let Some(p) = &a.preview {
        out.add(p, io::encode_depth_preview(&depth)?);
    }
    let mut report = Report::new();
    report
        .push("width", stack.width)
        .push("height", stack.height)
        .push("frames", stack.frames)
        .push("window", window)
        .push("sigma_px", a.pipeline.sigma)
        .push("min_confidence", a.min_confidence)
        .push("min_contrast", a.min_contrast)
        .push("valid_fraction", depth.valid_fraction())
        .push("transient_slices", slices);
    out.add(&a.report, report.to_string().into_bytes());
    Ok(out)
}

fn temporal(common: &CommonArgs, a: &TemporalArgs) -> Result<Outputs, CliError> {
    let (_, tau, window) = load_transient(&a.stack, &a.pipeline, &a.illum)?;
    let est = temporal_coherence_length(&tau.positions, &tau.mean_profile(), !a.no_sqrt)?;
    let mut report = Report::new();
    report
        .push("mode", "temporal")
        .push("window", window)
        .push("fitted_sqrt", est.fitted_sqrt)
        .push("fwhm_um", est.fwhm)
        .push("sigma_um", est.fit.sigma)
        .push("center_um", est.fit.center)
        .push("amplitude", est.fit.amplitude)
        .push("offset", est.fit.offset)
        .push("rms_residual", est.fit.rms_residual)
        .push("iterations", est.fit.iterations);
    let mut out = Outputs::new(&common.out_dir);
    out.add(&a.report, report.to_string().into_bytes());
    Ok(out)
}

fn spatial(common: &CommonArgs, a: &SpatialArgs) -> Result<Outputs, CliError> {
    let (_, _, image) = io::decode_gray_image(&read_input(&a.image)?)?;
    if !(a.wavelength > 0.0) {
        return Err(usage("--wavelength must be positive"));
    }
    let kbar = std::f64::consts::TAU / a.wavelength;
    let est = spatial_coherence_length(&image, a.focal_length, a.pixel_pitch, kbar)?;
    let mut report = Report::new();
    report
        .push("mode", "spatial")
        .push("diameter_px", est.diameter_px)
        .push("angular_extent_rad", est.angular_extent)
        .push("angular_extent_deg", est.angular_extent.to_degrees())
        .push("spatial_length_um", est.spatial_length);
    let mut out = Outputs::new(&common.out_dir);
    out.add(&a.report, report.to_string().into_bytes());
    Ok(out)
}

fn track(common: &CommonArgs, a: &TrackArgs) -> Result<Outputs, CliError> {
    let mut cfg = match &a.config {
        Some(path) => read_json::<TrackerConfig>(path)?,
        None => TrackerConfig::default(),
    };
    if let Some(g) = a.gain {
        cfg.gain = g;
    }
    if let Some(q) = a.min_step {
        cfg.azimuth.min_step = q;
        cfg.altitude.min_step = q;
    }
    if let Some(r) = a.drift_rate {
        cfg.drift_rate = r;
    }
    if let Some(n) = a.sensing_noise {
        cfg.sensing_noise = n;
    }
    if a.no_quantize {
        cfg.quantize = false;
    }
    cfg.seed = common.seed;
    let mut state = TrackerState::new(cfg)?;
    let (report, lost_at) = match run_tracking(&mut state, a.duration, a.recenter_every) {
        Ok(r) => (r, None),
        Err(Error::TrackingLost { time, report }) => {
            eprintln!("warning: tracking lost at t = {time:.3} s");
            let r = report.map(|b| *b).unwrap_or(TrackingReport {
                trace: Vec::new(),
                max_error: 0.0,
                steady_state_error: 0.0,
                oscillating: false,
            });
            (r, Some(time))
        }
        Err(e) => return Err(e.into()),
    };
    let mut trace = String::from("t,err_az,err_alt,cmd_az,cmd_alt\n");
    for r in &report.trace {
        trace.push_str(&format!("{},{},{},{},{}\n", r.t, r.err_az, r.err_alt, r.cmd_az, r.cmd_alt));
    }
    let mut summary = Report::new();
    summary
        .push("steps", report.trace.len())
        .push("max_error_deg", report.max_error)
        .push("steady_state_error_deg", report.steady_state_error)
        .push("oscillating", report.oscillating)
        .push("lost", lost_at.is_some());
    if let Some(t) = lost_at {
        summary.push("lost_at_s", t);
    }
    let mut out = Outputs::new(&common.out_dir);
    out.add(&a.trace, trace.into_bytes());
    out.add(&a.summary, summary.to_string().into_bytes());
    Ok(out)
}

fn peaks(common: &CommonArgs, a: &PeaksArgs) -> Result<Outputs, CliError> {
    let (_, tau, _) = load_transient(&a.stack, &a.pipeline, &a.illum)?;
    let lt = a.illum.model()?.coherence_lengths().temporal;
    let list = extract_peaks(&tau, a.threshold, a.min_separation.unwrap_or(4.0 * lt))?;
    let mut csv = String::from("x,y,depth,amplitude\n");
    let mut histogram = [0usize; 4];
    for y in 0..list.height {
        for x in 0..list.width {
            let p = list.at(x, y);
            histogram[p.len().min(3)] += 1;
            for peak in p {
                csv.push_str(&format!("{x},{y},{},{}\n", peak.depth, peak.amplitude));
            }
        }
    }
    let mut report = Report::new();
    report
        .push("pixels", list.width * list.height)
        .push("pixels_0_peaks", histogram[0])
        .push("pixels_1_peak", histogram[1])
        .push("pixels_2_peaks", histogram[2])
        .push("pixels_3plus_peaks", histogram[3]);
    let mut out = Outputs::new(&common.out_dir);
    out.add(&a.out, csv.into_bytes());
    out.add(&a.report, report.to_string().into_bytes());
    Ok(out)
}
