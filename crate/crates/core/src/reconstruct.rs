//! Direct-only transient recovery from an axial intensity stack.
//!
//! The pipeline has three steps:
//!
//! 1. estimate the interference-free image by a moving average over nearby
//!    frames ([`interference_free`]),
//! 2. square the residual to estimate squared interference
//!    ([`squared_interference`]),
//! 3. blur each frame laterally with a Gaussian so speckle averages out,
//!    giving the squared correlation amplitude `τ` ([`correlation_amplitude`]).
//!
//! Depth is the axial position maximizing `τ`; multiple surfaces show up as
//! multiple peaks along the axis.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{transpose_columns, ImageStack};

/// Squared correlation amplitude `τ(x, l_m)`, frame-major like [`ImageStack`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransientVolume {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub positions: Vec<f64>,
    pub data: Vec<f64>,
}

impl TransientVolume {
    pub fn new(width: usize, height: usize, positions: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        let frames = positions.len();
        if data.len() != width * height * frames {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height}x{frames} volume",
                data.len()
            )));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::param("tau", "must be finite and non-negative"));
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

    pub fn column(&self, i: usize) -> Vec<f64> {
        let n = self.pixel_count();
        (0..self.frames).map(|m| self.data[m * n + i]).collect()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// τ averaged over all pixels, per frame.
    pub fn mean_profile(&self) -> Vec<f64> {
        let n = self.pixel_count() as f64;
        (0..self.frames)
            .map(|m| self.frame(m).iter().sum::<f64>() / n)
            .collect()
    }

    fn is_empty(&self) -> bool {
        self.frames == 0 || self.width == 0 || self.height == 0
    }
}

/// Volume of squared interference estimates `¼(I − b)²`, same layout as the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct SquaredInterference {
    pub width: usize,
    pub height: usize,
    pub positions: Vec<f64>,
    pub data: Vec<f64>,
}

/// Default moving-average window: frames spanning `4·L_T`.
pub fn default_window(temporal_length: f64, step: f64) -> usize {
    ((4.0 * temporal_length / step).ceil() as usize).max(2)
}

/// Moving average of `window` frames around each frame, per pixel.
///
/// The window covers frames `m − ⌊N/2⌋ ..= m − ⌊N/2⌋ + N − 1`; near the ends of
/// the scan it is clipped to the available frames and the average taken over
/// what remains.
pub fn interference_free(stack: &ImageStack, window: usize) -> Result<ImageStack> {
    if window < 2 {
        return Err(Error::param("window", "must span at least 2 frames"));
    }
    if window > stack.frames {
        return Err(Error::param(
            "window",
            format!("{window} frames exceeds the {}-frame stack", stack.frames),
        ));
    }
    let m_total = stack.frames;
    let back = window / 2;
    let columns: Vec<Vec<f64>> = (0..stack.pixel_count())
        .into_par_iter()
        .map(|i| {
            let col = stack.column(i);
            let mut prefix = Vec::with_capacity(m_total + 1);
            prefix.push(0.0);
            let mut acc = 0.0;
            for v in &col {
                acc += v;
                prefix.push(acc);
            }
            (0..m_total)
                .map(|m| {
                    let lo = m.saturating_sub(back);
                    let hi = (m + window - back).min(m_total);
                    // direct sum when the prefix difference would lose precision
                    if hi - lo <= 64 {
                        col[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
                    } else {
                        (prefix[hi] - prefix[lo]) / (hi - lo) as f64
                    }
                })
                .collect()
        })
        .collect();
    ImageStack::new(
        stack.width,
        stack.height,
        stack.positions.clone(),
        transpose_columns(&columns, m_total),
    )
}

/// `¼(I − b)²` elementwise.
pub fn squared_interference(stack: &ImageStack, smooth: &ImageStack) -> Result<SquaredInterference> {
    if !stack.same_grid(smooth.width, smooth.height, smooth.frames) {
        return Err(Error::DimensionMismatch(format!(
            "stack is {}x{}x{}, interference-free estimate is {}x{}x{}",
            stack.width, stack.height, stack.frames, smooth.width, smooth.height, smooth.frames
        )));
    }
    let data = stack
        .data
        .par_iter()
        .zip(&smooth.data)
        .map(|(i, b)| 0.25 * (i - b) * (i - b))
        .collect();
    Ok(SquaredInterference {
        width: stack.width,
        height: stack.height,
        positions: stack.positions.clone(),
        data,
    })
}

/// Normalized 1-D Gaussian taps for std `sigma`, radius `⌈4σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Mirror an out-of-range index back into `0..n` (edge pixel repeated: `d c b a | a b c d`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Separable Gaussian blur of one `w×h` image with reflect padding.
pub fn blur_frame(frame: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &frame[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, g)| g * row[reflect(x as i64 + k as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, g)| g * tmp[reflect(y as i64 + k as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Per-frame lateral Gaussian blur (std `sigma` pixels) of the squared interference.
pub fn correlation_amplitude(r: &SquaredInterference, sigma: f64) -> Result<TransientVolume> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::param("sigma", "blur std must be positive"));
    }
    let (w, h) = (r.width, r.height);
    let n = w * h;
    let kernel = gaussian_kernel(sigma);
    let data: Vec<f64> = r
        .data
        .par_chunks(n)
        .flat_map_iter(|frame| blur_frame(frame, w, h, &kernel))
        .map(|v: f64| v.max(0.0))
        .collect();
    TransientVolume::new(w, h, r.positions.clone(), data)
}

/// Full pipeline: moving average, squared residual, lateral blur.
pub fn reconstruct_transient(stack: &ImageStack, window: usize, sigma: f64) -> Result<TransientVolume> {
    let smooth = interference_free(stack, window)?;
    let r = squared_interference(stack, &smooth)?;
    correlation_amplitude(&r, sigma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// µm; meaningful only where `valid`.
    pub depth: Vec<f64>,
    /// Peak τ value.
    pub confidence: Vec<f64>,
    pub valid: Vec<bool>,
    /// Frame index of the peak.
    pub bins: Vec<usize>,
}

impl DepthMap {
    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|v| **v).count() as f64 / self.valid.len() as f64
    }

    /// Depth raster with invalid pixels as NaN.
    pub fn masked_depth(&self) -> Vec<f64> {
        self.depth
            .iter()
            .zip(&self.valid)
            .map(|(d, v)| if *v { *d } else { f64::NAN })
            .collect()
    }
}

/// Index of the largest value; ties resolve to the smallest index.
fn argmax(col: &[f64]) -> (usize, f64) {
    col.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
}

/// Vertex offset (in bins, within ±½) of the parabola through three samples.
fn parabolic_offset(before: f64, peak: f64, after: f64) -> f64 {
    let denom = before - 2.0 * peak + after;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (before - after) / denom).clamp(-0.5, 0.5)
}

/// Thresholds for [`extract_depth_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthOptions {
    /// Minimum peak τ as a fraction of the global maximum.
    pub min_conf: f64,
    /// Minimum ratio of a pixel's peak to the median of its own transient;
    /// `0` disables the test.
    pub min_contrast: f64,
    /// Sub-bin parabolic refinement.
    pub refine: bool,
}

impl Default for DepthOptions {
    fn default() -> Self {
        Self {
            min_conf: 0.0,
            min_contrast: 0.0,
            refine: false,
        }
    }
}

/// Per-pixel argmax depth.
///
/// A pixel is invalid when its peak is below `min_conf` times the global
/// maximum of `τ`, or (for `min_conf > 0`) when its transient is flat and so has
/// no peak at all. With `refine`, the depth is moved to the vertex of the
/// parabola through the peak and its two neighbors.
pub fn extract_depth(tau: &TransientVolume, min_conf: f64, refine: bool) -> Result<DepthMap> {
    extract_depth_with(
        tau,
        &DepthOptions {
            min_conf,
            min_contrast: 0.0,
            refine,
        },
    )
}

/// [`extract_depth`] with an additional peak-to-background test.
///
/// The global threshold is blind to a uniform loss of signal, since it scales
/// with the signal. The contrast test compares each peak with the median of
/// the same pixel's transient, which tracks the noise floor instead.
pub fn extract_depth_with(tau: &TransientVolume, opts: &DepthOptions) -> Result<DepthMap> {
    if tau.is_empty() {
        return Err(Error::Empty("transient volume"));
    }
    let DepthOptions {
        min_conf,
        min_contrast,
        refine,
    } = *opts;
    if !(min_conf.is_finite() && min_conf >= 0.0) {
        return Err(Error::param("min_conf", "must be non-negative"));
    }
    if !(min_contrast.is_finite() && min_contrast >= 0.0) {
        return Err(Error::param("min_contrast", "must be non-negative"));
    }
    let global = tau.max();
    let threshold = min_conf * global;
    let m_total = tau.frames;
    let step = if m_total > 1 {
        tau.positions[1] - tau.positions[0]
    } else {
        0.0
    };
    let (first, last) = (tau.positions[0], tau.positions[m_total - 1]);

    let per_pixel: Vec<(f64, f64, bool, usize)> = (0..tau.pixel_count())
        .into_par_iter()
        .map(|i| {
            let col = tau.column(i);
            let (m, peak) = argmax(&col);
            let lowest = col.iter().copied().fold(f64::INFINITY, f64::min);
            let flat = peak <= lowest;
            let mut valid = peak >= threshold && !(min_conf > 0.0 && flat);
            if min_contrast > 0.0 {
                let background = median(&col);
                valid &= !flat && peak >= min_contrast * background;
            }
            let mut d = tau.positions[m];
            if refine && m > 0 && m + 1 < m_total {
                d = (d + parabolic_offset(col[m - 1], peak, col[m + 1]) * step).clamp(first, last);
            }
            (d, peak, valid, m)
        })
        .collect();

    Ok(DepthMap {
        width: tau.width,
        height: tau.height,
        depth: per_pixel.iter().map(|p| p.0).collect(),
        confidence: per_pixel.iter().map(|p| p.1).collect(),
        valid: per_pixel.iter().map(|p| p.2).collect(),
        bins: per_pixel.iter().map(|p| p.3).collect(),
    })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub depth: f64,
    pub amplitude: f64,
}

/// Peaks per pixel, each list ordered near to far.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakList {
    pub width: usize,
    pub height: usize,
    pub peaks: Vec<Vec<Peak>>,
}

impl PeakList {
    pub fn at(&self, x: usize, y: usize) -> &[Peak] {
        &self.peaks[y * self.width + x]
    }
}

/// Peaks of one axial profile: local maxima at or above `threshold` times the
/// profile maximum, accepted greedily by amplitude so that no two are closer
/// than `min_separation`.
pub fn profile_peaks(positions: &[f64], col: &[f64], threshold: f64, min_separation: f64) -> Vec<Peak> {
    let (_, top) = argmax(col);
    if !(top > 0.0) {
        return Vec::new();
    }
    let floor = threshold * top;
    let n = col.len();
    let mut candidates: Vec<Peak> = (0..n)
        .filter(|&m| {
            let v = col[m];
            let left = m == 0 || v > col[m - 1];
            let right = m + 1 == n || v >= col[m + 1];
            v >= floor && left && right
        })
        .map(|m| Peak {
            depth: positions[m],
            amplitude: col[m],
        })
        .collect();
    // stable sort keeps nearer candidates first among equal amplitudes
    candidates.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude));
    let mut accepted: Vec<Peak> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|a| (a.depth - c.depth).abs() >= min_separation) {
            accepted.push(c);
        }
    }
    accepted.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    accepted
}

pub fn extract_peaks(tau: &TransientVolume, threshold: f64, min_separation: f64) -> Result<PeakList> {
    if tau.is_empty() {
        return Err(Error::Empty("transient volume"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param("threshold", "must lie in (0, 1)"));
    }
    if !(min_separation.is_finite() && min_separation > 0.0) {
        return Err(Error::param("min_separation", "must be positive"));
    }
    let peaks = (0..tau.pixel_count())
        .into_par_iter()
        .map(|i| profile_peaks(&tau.positions, &tau.column(i), threshold, min_separation))
        .collect();
    Ok(PeakList {
        width: tau.width,
        height: tau.height,
        peaks,
    })
}

/// τ at the recovered depth bin of each valid pixel; invalid pixels are 0.
pub fn direct_only_image(tau: &TransientVolume, depth: &DepthMap) -> Result<Vec<f64>> {
    if tau.width != depth.width || tau.height != depth.height {
        return Err(Error::DimensionMismatch("depth map and transient differ in size".into()));
    }
    let n = tau.pixel_count();
    Ok((0..n)
        .map(|i| {
            if depth.valid[i] {
                tau.data[depth.bins[i] * n + i]
            } else {
                0.0
            }
        })
        .collect())
}
