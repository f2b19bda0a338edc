//! Layered scene model.
//!
//! A scene is an ordered stack of surface layers (front to back), each carrying
//! a per-pixel depth, reflectance amplitude, microstructure phase and
//! transparency. The diagonal of the transmission matrix is the sum of the
//! layer reflections at a pixel; near-diagonal (indirect) transport is a small
//! shift-invariant kernel of taps with an extra pathlength each.

use std::f64::consts::TAU;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::spatial_weight;

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceLayer {
    /// µm, per pixel.
    pub depth: Vec<f64>,
    /// Reflectance amplitude ≥ 0, per pixel.
    pub amplitude: Vec<f64>,
    /// Microstructure phase in [0, 2π), per pixel.
    pub microphase: Vec<f64>,
    /// Fraction of light passing through, per pixel.
    pub transparency: Vec<f64>,
}

impl SurfaceLayer {
    /// Opaque layer with no microstructure.
    pub fn uniform(width: usize, height: usize, depth: f64, amplitude: f64) -> Self {
        let n = width * height;
        Self {
            depth: vec![depth; n],
            amplitude: vec![amplitude; n],
            microphase: vec![0.0; n],
            transparency: vec![0.0; n],
        }
    }

    /// Replaces the microphase with i.i.d. uniform phases drawn from `seed`.
    pub fn with_random_microphase(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.microphase {
            *p = rng.random_range(0.0..TAU);
        }
        self
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.depth.len() != n
            || self.amplitude.len() != n
            || self.microphase.len() != n
            || self.transparency.len() != n
        {
            return Err(Error::DimensionMismatch(format!(
                "layer fields must all have {n} entries"
            )));
        }
        if self.depth.iter().any(|d| !d.is_finite()) {
            return Err(Error::param("depth", "must be finite"));
        }
        if self.amplitude.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::param("amplitude", "must be finite and non-negative"));
        }
        if self.microphase.iter().any(|p| !(0.0..TAU).contains(p)) {
            return Err(Error::param("microphase", "must lie in [0, 2π)"));
        }
        if self.transparency.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::param("transparency", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One near-diagonal transport path, applied at every pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelTap {
    /// Lateral offset of the source pixel x′ relative to x, pixels.
    pub dx: i32,
    pub dy: i32,
    /// w(x, x′) ≥ 0.
    pub weight: f64,
    /// Extra pathlength of the indirect path, µm.
    pub extra_path: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndirectKernel {
    pub taps: Vec<KernelTap>,
}

impl IndirectKernel {
    pub fn new(taps: Vec<KernelTap>) -> Result<Self> {
        let k = Self { taps };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.taps {
            if t.dx == 0 && t.dy == 0 {
                return Err(Error::param("kernel", "the diagonal tap belongs to the surface layers"));
            }
            if !(t.weight.is_finite() && t.weight >= 0.0) {
                return Err(Error::param("kernel", "tap weights must be finite and non-negative"));
            }
            if !t.extra_path.is_finite() {
                return Err(Error::param("kernel", "extra pathlengths must be finite"));
            }
        }
        Ok(())
    }

    /// Σ w over all taps.
    pub fn mass(&self) -> f64 {
        self.taps.iter().map(|t| t.weight).sum()
    }

    /// Largest lateral tap offset, pixels.
    pub fn radius(&self) -> f64 {
        self.taps
            .iter()
            .map(|t| f64::from(t.dx).hypot(f64::from(t.dy)))
            .fold(0.0, f64::max)
    }
}

/// A path contributing to the correlation at one pixel: its total depth and
/// complex amplitude (before the reference amplitude and coherence gating).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathResponse {
    pub depth: f64,
    pub amplitude: Complex64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// µm per pixel on the in-focus plane.
    pub pixel_pitch: f64,
    pub layers: Vec<SurfaceLayer>,
    pub indirect: Option<IndirectKernel>,
}

impl Scene {
    pub fn new(
        width: usize,
        height: usize,
        pixel_pitch: f64,
        layers: Vec<SurfaceLayer>,
        indirect: Option<IndirectKernel>,
    ) -> Result<Self> {
        let scene = Self {
            width,
            height,
            pixel_pitch,
            layers,
            indirect,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("width", "scene must have at least one pixel"));
        }
        if !(self.pixel_pitch.is_finite() && self.pixel_pitch > 0.0) {
            return Err(Error::param("pixel_pitch", "must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::param("layers", "at least one layer is required"));
        }
        let n = self.width * self.height;
        for layer in &self.layers {
            layer.validate(n)?;
        }
        if let Some(k) = &self.indirect {
            k.validate()?;
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    fn index(&self, x: usize, y: usize) -> Result<usize> {
        if x >= self.width || y >= self.height {
            return Err(Error::OutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(y * self.width + x)
    }

    /// Direct reflections at pixel (x, y): one entry per layer with nonzero
    /// effective amplitude, front to back.
    ///
    /// A layer's amplitude is attenuated by the squared transparency of every
    /// layer in front of it (light crosses each of them twice).
    pub fn diagonal_response(&self, x: usize, y: usize) -> Result<Vec<PathResponse>> {
        let i = self.index(x, y)?;
        Ok(self.diagonal_at(i))
    }

    pub(crate) fn diagonal_at(&self, i: usize) -> Vec<PathResponse> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut through = 1.0;
        for layer in &self.layers {
            let a = layer.amplitude[i] * through;
            if a > 0.0 {
                out.push(PathResponse {
                    depth: layer.depth[i],
                    amplitude: Complex64::from_polar(a, layer.microphase[i]),
                });
            }
            let t = layer.transparency[i];
            through *= t * t;
            if through == 0.0 {
                break;
            }
        }
        out
    }

    /// Indirect paths reaching pixel `i`, with spatial-coherence weighting
    /// `sinc(2ε/L_S)` already applied. Depths are relative to the front layer.
    pub(crate) fn indirect_paths(&self, i: usize, spatial_length: f64) -> Vec<PathResponse> {
        let Some(kernel) = &self.indirect else {
            return Vec::new();
        };
        let (x, y) = ((i % self.width) as i64, (i / self.width) as i64);
        let front = self.layers[0].depth[i];
        kernel
            .taps
            .iter()
            .filter(|t| {
                let (sx, sy) = (x + i64::from(t.dx), y + i64::from(t.dy));
                sx >= 0 && sy >= 0 && (sx as usize) < self.width && (sy as usize) < self.height
            })
            .filter_map(|t| {
                let eps = f64::from(t.dx).hypot(f64::from(t.dy)) * self.pixel_pitch;
                let w = t.weight * spatial_weight(eps, spatial_length);
                (w != 0.0).then_some(PathResponse {
                    depth: front + t.extra_path,
                    amplitude: Complex64::new(w, 0.0),
                })
            })
            .collect()
    }

    /// Σ w(x,x′)·sinc(2|x−x′|/L_S)·e^{iκ̄Δℓ} over the kernel neighborhood of (x, y).
    ///
    /// Zero when the scene has no kernel.
    pub fn indirect_response(
        &self,
        x: usize,
        y: usize,
        mean_wavenumber: f64,
        spatial_length: f64,
    ) -> Result<Complex64> {
        let i = self.index(x, y)?;
        if spatial_length.is_nan() || spatial_length < 0.0 {
            return Err(Error::param("spatial_length", "must be non-negative"));
        }
        let front = self.layers[0].depth[i];
        Ok(self
            .indirect_paths(i, spatial_length)
            .iter()
            .map(|p| p.amplitude * Complex64::from_polar(1.0, mean_wavenumber * (p.depth - front)))
            .sum())
    }

    /// Incoherent scene-arm intensity |u_s|² at pixel `i`.
    pub(crate) fn scene_intensity(&self, i: usize) -> f64 {
        let direct: f64 = self.diagonal_at(i).iter().map(|p| p.amplitude.norm_sqr()).sum();
        let indirect: f64 = self
            .indirect
            .as_ref()
            .map(|k| k.taps.iter().map(|t| t.weight * t.weight).sum())
            .unwrap_or(0.0);
        direct + indirect
    }

    /// Depth of the front layer, the ground truth a single-surface
    /// reconstruction should recover.
    pub fn front_depth(&self) -> &[f64] {
        &self.layers[0].depth
    }

    pub fn depth_range(&self) -> (f64, f64) {
        self.layers
            .iter()
            .flat_map(|l| l.depth.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Flat,
    Step,
    Ramp,
    TwoLayerDiffuser,
    CheckerReflectance,
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(SceneKind::Flat),
            "step" => Ok(SceneKind::Step),
            "ramp" => Ok(SceneKind::Ramp),
            "two_layer_diffuser" => Ok(SceneKind::TwoLayerDiffuser),
            "checker_reflectance" => Ok(SceneKind::CheckerReflectance),
            other => Err(Error::Unknown {
                what: "scene kind",
                name: other.to_string(),
            }),
        }
    }
}

/// Parameters for the synthetic scenes. This is also the scene file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestSceneParams {
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
    /// µm per pixel.
    pub pixel_pitch: f64,
    /// Depth of the (front) surface, µm.
    pub depth: f64,
    /// Step height for `step`, total depth change across the image for `ramp`, µm.
    pub height_delta: f64,
    /// Front-to-back separation for `two_layer_diffuser`, µm.
    pub gap: f64,
    /// Reflectance amplitude of the main surface.
    pub amplitude: f64,
    /// `checker_reflectance`: amplitude of the dark squares and square size in pixels.
    pub checker_low: f64,
    pub checker_size: usize,
    /// `two_layer_diffuser`: front layer reflectance and transparency.
    pub front_amplitude: f64,
    pub front_transparency: f64,
    /// Optional per-column amplitude falloff: amplitude at the last column is
    /// `amplitude * (1 - falloff)`.
    pub amplitude_falloff: f64,
    /// Random microstructure phase (speckle) on every layer.
    pub speckle: bool,
    pub seed: u64,
    pub indirect: Option<IndirectKernel>,
}

impl Default for TestSceneParams {
    fn default() -> Self {
        Self {
            kind: SceneKind::Flat,
            width: 64,
            height: 64,
            pixel_pitch: 3.7,
            depth: 500.0,
            height_delta: 50.0,
            gap: 4000.0,
            amplitude: 1.0,
            checker_low: 0.3,
            checker_size: 16,
            front_amplitude: 0.45,
            front_transparency: 0.7,
            amplitude_falloff: 0.0,
            speckle: true,
            seed: 0,
            indirect: None,
        }
    }
}

impl TestSceneParams {
    pub fn new(kind: SceneKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

/// Builds one of the synthetic scenes. Deterministic given `params.seed`.
pub fn make_test_scene(params: &TestSceneParams) -> Result<Scene> {
    let (w, h) = (params.width, params.height);
    if w == 0 || h == 0 {
        return Err(Error::param("width", "scene must have at least one pixel"));
    }
    if !(params.amplitude.is_finite() && params.amplitude >= 0.0) {
        return Err(Error::param("amplitude", "must be non-negative"));
    }
    if !(0.0..=1.0).contains(&params.amplitude_falloff) {
        return Err(Error::param("amplitude_falloff", "must lie in [0, 1]"));
    }
    let mut base = SurfaceLayer::uniform(w, h, params.depth, params.amplitude);
    if params.amplitude_falloff > 0.0 && w > 1 {
        for y in 0..h {
            for x in 0..w {
                let f = x as f64 / (w - 1) as f64;
                base.amplitude[y * w + x] = params.amplitude * (1.0 - params.amplitude_falloff * f);
            }
        }
    }

    let layers = match params.kind {
        SceneKind::Flat => vec![base],
        SceneKind::Step => {
            // left half at `depth`, right half raised toward the camera
            for y in 0..h {
                for x in w / 2..w {
                    base.depth[y * w + x] = params.depth - params.height_delta;
                }
            }
            vec![base]
        }
        SceneKind::Ramp => {
            for y in 0..h {
                for x in 0..w {
                    let f = if w > 1 { x as f64 / (w - 1) as f64 } else { 0.0 };
                    base.depth[y * w + x] = params.depth + params.height_delta * f;
                }
            }
            vec![base]
        }
        SceneKind::CheckerReflectance => {
            if params.checker_size == 0 {
                return Err(Error::param("checker_size", "must be positive"));
            }
            for y in 0..h {
                for x in 0..w {
                    if ((x / params.checker_size) + (y / params.checker_size)) % 2 == 1 {
                        base.amplitude[y * w + x] *= params.checker_low;
                    }
                }
            }
            vec![base]
        }
        SceneKind::TwoLayerDiffuser => {
            if !(0.0..=1.0).contains(&params.front_transparency) {
                return Err(Error::param("front_transparency", "must lie in [0, 1]"));
            }
            let mut front = SurfaceLayer::uniform(w, h, params.depth, params.front_amplitude);
            front.transparency.fill(params.front_transparency);
            let back = SurfaceLayer {
                depth: vec![params.depth + params.gap; w * h],
                ..base
            };
            vec![front, back]
        }
    };

    let layers = if params.speckle {
        layers
            .into_iter()
            .enumerate()
            .map(|(k, l)| l.with_random_microphase(mix_seed(params.seed, k as u64)))
            .collect()
    } else {
        layers
    };
    Scene::new(w, h, params.pixel_pitch, layers, params.indirect.clone())
}

/// Loads a scene description (a [`TestSceneParams`] document) from JSON text.
pub fn scene_from_json(text: &str) -> Result<Scene> {
    let params: TestSceneParams =
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    make_test_scene(&params)
}

/// SplitMix64 finalizer over a pair of keys.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
