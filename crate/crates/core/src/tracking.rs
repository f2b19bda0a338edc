//! Closed-loop Sun tracking simulation.
//!
//! The tracking mirror sits on two rotation stages (azimuth, altitude) that
//! move in multiples of a minimum increment. The Sun drifts across the sky; a
//! tracking camera at infinity focus sees the beam's angular error as a pixel
//! offset from its principal point, and a proportional controller issues
//! quantized corrections every `recenter_every` frames.
//!
//! Angles are in degrees, time in seconds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Solar drift rate: 0.02° per 100 frames at 50 ms each.
pub const DEFAULT_DRIFT_RATE: f64 = 0.02 / (100.0 * 0.05);
/// Minimum incremental motion of the rotation stages, degrees.
pub const DEFAULT_MIN_STEP: f64 = 0.03;
pub const DEFAULT_FRAME_TIME: f64 = 0.05;
pub const DEFAULT_RECENTER_EVERY: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageModel {
    /// q, degrees.
    pub min_step: f64,
    /// degrees/s.
    pub max_speed: f64,
    /// degrees/s².
    pub max_accel: f64,
    /// Current angle, degrees.
    pub angle: f64,
}

impl Default for StageModel {
    fn default() -> Self {
        Self {
            min_step: DEFAULT_MIN_STEP,
            max_speed: 10.0,
            max_accel: 20.0,
            angle: 0.0,
        }
    }
}

impl StageModel {
    /// Rounds a command to the nearest multiple of `min_step`; anything under
    /// half a step becomes zero.
    pub fn quantize(&self, command: f64) -> f64 {
        (command / self.min_step).round() * self.min_step
    }

    /// Time for a rest-to-rest move of `distance` under a trapezoidal profile.
    pub fn move_time(&self, distance: f64) -> f64 {
        let d = distance.abs();
        let (v, a) = (self.max_speed, self.max_accel);
        if d <= v * v / a {
            2.0 * (d / a).sqrt()
        } else {
            d / v + v / a
        }
    }

    /// Longest rest-to-rest move that completes within `time`.
    pub fn reach(&self, time: f64) -> f64 {
        let (v, a) = (self.max_speed, self.max_accel);
        let t_ramp = 2.0 * v / a;
        if time <= t_ramp {
            a * time * time / 4.0
        } else {
            v * (time - v / a)
        }
    }

    fn validate(&self, name: &'static str) -> Result<()> {
        for v in [self.min_step, self.max_speed, self.max_accel] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(name, "step, speed and acceleration must be positive"));
            }
        }
        if !self.angle.is_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub azimuth: StageModel,
    pub altitude: StageModel,
    /// Sun drift rate, degrees/s.
    pub drift_rate: f64,
    /// Direction of drift in the (azimuth, altitude) plane, radians from the azimuth axis.
    pub drift_direction: f64,
    /// Initial pointing error (azimuth, altitude), degrees.
    pub initial_error: (f64, f64),
    /// Tracking camera principal point, pixels.
    pub principal_point: (f64, f64),
    /// Pixel displacement per degree of stage rotation (row-major 2×2).
    pub sensitivity: [[f64; 2]; 2],
    /// Proportional gain k_p applied to the angle-space error.
    pub gain: f64,
    /// Half-width of the tracking camera field of view, pixels.
    pub fov_half_width: f64,
    /// Std of Gaussian centroid noise, pixels.
    pub sensing_noise: f64,
    pub frame_time: f64,
    /// When false, commands are applied unquantized.
    pub quantize: bool,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            azimuth: StageModel::default(),
            altitude: StageModel::default(),
            drift_rate: DEFAULT_DRIFT_RATE,
            drift_direction: 0.0,
            initial_error: (0.0, 0.0),
            principal_point: (1024.0, 768.0),
            sensitivity: [[100.0, 0.0], [0.0, 100.0]],
            gain: 0.5,
            fov_half_width: 500.0,
            sensing_noise: 0.0,
            frame_time: DEFAULT_FRAME_TIME,
            quantize: true,
            seed: 0,
        }
    }
}

/// Angular drift of the Sun after `t` seconds, as (Δaz, Δalt) degrees.
pub fn sun_drift(t: f64, rate: f64, direction: f64) -> Result<(f64, f64)> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::param("t", "must be non-negative"));
    }
    let s = rate * t;
    Ok((s * direction.cos(), s * direction.sin()))
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    pub config: TrackerConfig,
    pub azimuth: StageModel,
    pub altitude: StageModel,
    /// Simulation clock, seconds.
    pub time: f64,
    inverse_sensitivity: [[f64; 2]; 2],
    rng: ChaCha8Rng,
}

impl TrackerState {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        config.azimuth.validate("azimuth")?;
        config.altitude.validate("altitude")?;
        let [[a, b], [c, d]] = config.sensitivity;
        let det = a * d - b * c;
        if !(det.is_finite() && det.abs() > 1e-12) {
            return Err(Error::param("sensitivity", "matrix must be invertible"));
        }
        if !(config.gain.is_finite() && config.gain > 0.0) {
            return Err(Error::param("gain", "must be positive"));
        }
        if !(config.fov_half_width > 0.0) {
            return Err(Error::param("fov_half_width", "must be positive"));
        }
        if !(config.frame_time > 0.0) {
            return Err(Error::param("frame_time", "must be positive"));
        }
        if !(config.sensing_noise >= 0.0) {
            return Err(Error::param("sensing_noise", "must be non-negative"));
        }
        let mut azimuth = config.azimuth;
        let mut altitude = config.altitude;
        azimuth.angle += config.initial_error.0;
        altitude.angle += config.initial_error.1;
        Ok(Self {
            inverse_sensitivity: [[d / det, -b / det], [-c / det, a / det]],
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            azimuth,
            altitude,
            time: 0.0,
            config,
        })
    }

    /// Stage pointing minus the pointing that would center the Sun now, degrees.
    pub fn angular_error(&self) -> (f64, f64) {
        let (daz, dalt) = sun_drift(self.time, self.config.drift_rate, self.config.drift_direction)
            .unwrap_or((0.0, 0.0));
        (
            self.azimuth.angle - self.config.azimuth.angle - daz,
            self.altitude.angle - self.config.altitude.angle - dalt,
        )
    }

    fn to_pixels(&self, e: (f64, f64)) -> (f64, f64) {
        let s = self.config.sensitivity;
        (s[0][0] * e.0 + s[0][1] * e.1, s[1][0] * e.0 + s[1][1] * e.1)
    }

    /// True when the Sun image lies inside the tracking camera's field of view.
    pub fn sun_in_view(&self) -> bool {
        let (px, py) = self.to_pixels(self.angular_error());
        px.abs() <= self.config.fov_half_width && py.abs() <= self.config.fov_half_width
    }

    /// Offset of the Sun image centroid from the principal point, pixels.
    pub fn measure_error(&mut self) -> Result<(f64, f64)> {
        if !self.sun_in_view() {
            return Err(Error::TrackingLost {
                time: self.time,
                report: None,
            });
        }
        let (mut px, mut py) = self.to_pixels(self.angular_error());
        if self.config.sensing_noise > 0.0 {
            let nx: f64 = StandardNormal.sample(&mut self.rng);
            let ny: f64 = StandardNormal.sample(&mut self.rng);
            px += self.config.sensing_noise * nx;
            py += self.config.sensing_noise * ny;
        }
        Ok((px, py))
    }

    /// Stage command `−k_p·S⁻¹·error`, quantized per stage (unless disabled).
    pub fn control_step(&self, error_px: (f64, f64)) -> (f64, f64) {
        let inv = self.inverse_sensitivity;
        let k = self.config.gain;
        let az = -k * (inv[0][0] * error_px.0 + inv[0][1] * error_px.1);
        let alt = -k * (inv[1][0] * error_px.0 + inv[1][1] * error_px.1);
        if self.config.quantize {
            (self.azimuth.quantize(az), self.altitude.quantize(alt))
        } else {
            (az, alt)
        }
    }

    /// Executes a command, truncated to what each stage can reach within `time`.
    fn apply(&mut self, command: (f64, f64), time: f64) -> (f64, f64) {
        let quantize = self.config.quantize;
        let limit = |stage: &StageModel, cmd: f64| {
            if stage.move_time(cmd) <= time {
                return cmd;
            }
            let reach = stage.reach(time);
            let reach = if quantize {
                (reach / stage.min_step).floor() * stage.min_step
            } else {
                reach
            };
            reach.copysign(cmd)
        };
        let az = limit(&self.azimuth, command.0);
        let alt = limit(&self.altitude, command.1);
        self.azimuth.angle += az;
        self.altitude.angle += alt;
        (az, alt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    /// Angular error sensed at `t`, before the correction, degrees.
    pub err_az: f64,
    pub err_alt: f64,
    /// Executed stage motion, degrees.
    pub cmd_az: f64,
    pub cmd_alt: f64,
}

impl TraceRow {
    pub fn error_magnitude(&self) -> f64 {
        self.err_az.hypot(self.err_alt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub trace: Vec<TraceRow>,
    pub max_error: f64,
    /// Largest error over the second half of the run.
    pub steady_state_error: f64,
    pub oscillating: bool,
}

impl TrackingReport {
    fn from_trace(trace: Vec<TraceRow>) -> Self {
        let max_error = trace.iter().map(TraceRow::error_magnitude).fold(0.0, f64::max);
        let steady_state_error = trace[trace.len() / 2..]
            .iter()
            .map(TraceRow::error_magnitude)
            .fold(0.0, f64::max);
        let oscillating = detect_oscillation(trace.iter().map(|r| r.err_az))
            || detect_oscillation(trace.iter().map(|r| r.err_alt));
        Self {
            trace,
            max_error,
            steady_state_error,
            oscillating,
        }
    }
}

/// Three consecutive nonzero errors alternating in sign without shrinking.
pub fn detect_oscillation(errors: impl IntoIterator<Item = f64>) -> bool {
    let e: Vec<f64> = errors.into_iter().collect();
    e.windows(3).any(|w| {
        w.iter().all(|v| *v != 0.0)
            && w[0].signum() != w[1].signum()
            && w[1].signum() != w[2].signum()
            && w[1].abs() >= w[0].abs()
            && w[2].abs() >= w[1].abs()
    })
}

/// Runs the loop for `duration` seconds, recentering every `recenter_every`
/// frames. A run that loses the Sun returns [`Error::TrackingLost`] carrying
/// the trace up to that point.
pub fn run_tracking(state: &mut TrackerState, duration: f64, recenter_every: usize) -> Result<TrackingReport> {
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(Error::param("duration", "must be non-negative"));
    }
    if recenter_every == 0 {
        return Err(Error::param("recenter_every", "must be at least one frame"));
    }
    let interval = recenter_every as f64 * state.config.frame_time;
    let steps = (duration / interval + 1e-9).floor() as usize;
    let start = state.time;
    let mut trace = Vec::with_capacity(steps);
    for k in 1..=steps {
        state.time = start + k as f64 * interval;
        let err = state.angular_error();
        let sensed = match state.measure_error() {
            Ok(px) => px,
            Err(Error::TrackingLost { time, .. }) => {
                let report = (!trace.is_empty()).then(|| Box::new(TrackingReport::from_trace(trace)));
                return Err(Error::TrackingLost { time, report });
            }
            Err(e) => return Err(e),
        };
        let command = state.control_step(sensed);
        let (cmd_az, cmd_alt) = state.apply(command, interval);
        trace.push(TraceRow {
            t: state.time,
            err_az: err.0,
            err_alt: err.1,
            cmd_az,
            cmd_alt,
        });
    }
    if trace.is_empty() {
        return Ok(TrackingReport {
            trace,
            max_error: 0.0,
            steady_state_error: 0.0,
            oscillating: false,
        });
    }
    Ok(TrackingReport::from_trace(trace))
}
