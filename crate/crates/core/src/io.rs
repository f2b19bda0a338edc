//! File formats.
//!
//! Stack (`SUNIF1`), all little-endian:
//!
//! | offset | size | field                        |
//! |--------|------|------------------------------|
//! | 0      | 6    | magic `SUNIF1`               |
//! | 6      | 4    | width (u32)                  |
//! | 10     | 4    | height (u32)                 |
//! | 14     | 4    | frames (u32)                 |
//! | 18     | 8    | axial start, µm (f64)        |
//! | 26     | 8    | axial step, µm (f64)         |
//! | 34     | 4    | payload encoding tag (u32)   |
//! | 38     | W·H·M·4 | f32 samples, frame-major, row-major within a frame |
//!
//! Depth raster (`SUNDM1`): magic, width, height (u32), then W·H f32 row-major
//! with NaN for invalid pixels.
//!
//! Reports are `key=value` lines.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::forward::ImageStack;
use crate::reconstruct::{DepthMap, TransientVolume};

pub const STACK_MAGIC: &[u8; 6] = b"SUNIF1";
pub const DEPTH_MAGIC: &[u8; 6] = b"SUNDM1";
pub const ENCODING_F32: u32 = 1;
pub const STACK_HEADER_LEN: usize = 38;
pub const DEPTH_HEADER_LEN: usize = 14;

/// Parsed `SUNIF1` header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackFileHeader {
    pub width: u32,
    pub height: u32,
    pub frames: u32,
    pub start: f64,
    pub step: f64,
    pub encoding: u32,
}

impl StackFileHeader {
    pub fn payload_len(&self) -> u64 {
        self.width as u64 * self.height as u64 * self.frames as u64 * 4
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != STACK_MAGIC {
            return Err(Error::Format("not a SUNIF1 stack (bad magic)".into()));
        }
        let header = Self {
            width: r.read_u32::<LittleEndian>().map_err(truncated)?,
            height: r.read_u32::<LittleEndian>().map_err(truncated)?,
            frames: r.read_u32::<LittleEndian>().map_err(truncated)?,
            start: r.read_f64::<LittleEndian>().map_err(truncated)?,
            step: r.read_f64::<LittleEndian>().map_err(truncated)?,
            encoding: r.read_u32::<LittleEndian>().map_err(truncated)?,
        };
        if header.encoding != ENCODING_F32 {
            return Err(Error::Format(format!("unsupported payload encoding tag {}", header.encoding)));
        }
        if header.width == 0 || header.height == 0 || header.frames == 0 {
            return Err(Error::Format("zero-sized stack".into()));
        }
        if !(header.start.is_finite() && header.step.is_finite() && header.step > 0.0) {
            return Err(Error::Format("axial start/step must be finite with positive step".into()));
        }
        Ok(header)
    }

    fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(STACK_MAGIC)?;
        w.write_u32::<LittleEndian>(self.width)?;
        w.write_u32::<LittleEndian>(self.height)?;
        w.write_u32::<LittleEndian>(self.frames)?;
        w.write_f64::<LittleEndian>(self.start)?;
        w.write_f64::<LittleEndian>(self.step)?;
        w.write_u32::<LittleEndian>(self.encoding)
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated header".into())
    } else {
        Error::Io(e)
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
}

/// Serializes a uniformly spaced stack. Samples are narrowed to f32.
pub fn encode_stack(stack: &ImageStack) -> Result<Vec<u8>> {
    let (start, step) = uniform_grid(&stack.positions)?;
    let header = StackFileHeader {
        width: to_u32(stack.width, "width")?,
        height: to_u32(stack.height, "height")?,
        frames: to_u32(stack.frames, "frames")?,
        start,
        step,
        encoding: ENCODING_F32,
    };
    let mut out = Vec::with_capacity(STACK_HEADER_LEN + stack.data.len() * 4);
    header.write(&mut out)?;
    for &v in &stack.data {
        out.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(out)
}

/// Positions are regenerated as `start + m·step`.
pub fn decode_stack(bytes: &[u8]) -> Result<ImageStack> {
    let mut cur = Cursor::new(bytes);
    let header = StackFileHeader::read(&mut cur)?;
    let payload = &bytes[STACK_HEADER_LEN..];
    if payload.len() as u64 != header.payload_len() {
        return Err(Error::Format(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let positions = (0..header.frames as usize)
        .map(|m| header.start + m as f64 * header.step)
        .collect();
    ImageStack::new(header.width as usize, header.height as usize, positions, data)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn write_stack(path: &Path, stack: &ImageStack) -> Result<()> {
    atomic_write(path, &encode_stack(stack)?)
}

pub fn read_stack(path: &Path) -> Result<ImageStack> {
    decode_stack(&fs::read(path)?)
}

/// `(start, step)` of an evenly spaced axis; a single frame gets step 1.
fn uniform_grid(positions: &[f64]) -> Result<(f64, f64)> {
    let start = *positions.first().ok_or(Error::Empty("positions"))?;
    if positions.len() == 1 {
        return Ok((start, 1.0));
    }
    let step = (positions[positions.len() - 1] - start) / (positions.len() - 1) as f64;
    let tol = 1e-9 * step.abs().max(start.abs()).max(1.0);
    for (m, &p) in positions.iter().enumerate() {
        if (p - (start + m as f64 * step)).abs() > tol {
            return Err(Error::Format("stack positions are not evenly spaced".into()));
        }
    }
    Ok((start, step))
}

pub fn encode_depth(width: usize, height: usize, depth: &[f64]) -> Result<Vec<u8>> {
    if depth.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "depth has {} values for {width}x{height}",
            depth.len()
        )));
    }
    let mut out = Vec::with_capacity(DEPTH_HEADER_LEN + depth.len() * 4);
    out.write_all(DEPTH_MAGIC)?;
    out.write_u32::<LittleEndian>(to_u32(width, "width")?)?;
    out.write_u32::<LittleEndian>(to_u32(height, "height")?)?;
    for &v in depth {
        out.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(out)
}

/// Returns `(width, height, values)`; NaN marks invalid pixels.
pub fn decode_depth(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 6];
    cur.read_exact(&mut magic).map_err(truncated)?;
    if &magic != DEPTH_MAGIC {
        return Err(Error::Format("not a SUNDM1 depth raster (bad magic)".into()));
    }
    let w = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let h = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let payload = &bytes[DEPTH_HEADER_LEN..];
    if payload.len() as u64 != w as u64 * h as u64 * 4 {
        return Err(Error::Format(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            w as u64 * h as u64 * 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((w, h, values))
}

pub fn write_depth(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<()> {
    atomic_write(path, &encode_depth(width, height, depth)?)
}

pub fn read_depth(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_depth(&fs::read(path)?)
}

/// Writes through a sibling temporary file so readers never see partial output.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{}.partial", std::process::id()));
    path.with_file_name(name)
}

/// 16-bit grayscale PNG of one frame, scaled so `scale_max` maps to 65535.
pub fn encode_slice_png(frame: &[f64], width: usize, height: usize, scale_max: f64) -> Result<Vec<u8>> {
    if frame.len() != width * height {
        return Err(Error::DimensionMismatch("slice size".into()));
    }
    let scale = if scale_max > 0.0 { 65535.0 / scale_max } else { 0.0 };
    let pixels: Vec<u16> = frame
        .iter()
        .map(|&v| (v * scale).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(to_u32(width, "width")?, to_u32(height, "height")?, pixels)
        .ok_or_else(|| Error::DimensionMismatch("slice buffer".into()))?;
    encode_png(image::DynamicImage::ImageLuma16(img))
}

/// Slice indices emitted by an `every = k` export: `0, k, 2k, …` (⌈M/k⌉ of them).
pub fn slice_indices(frames: usize, every: usize) -> Vec<usize> {
    (0..frames).step_by(every.max(1)).collect()
}

/// Writes every `every`-th frame of a transient as `prefix_{m:05}.png`, normalized
/// by the volume maximum. Returns the paths written.
pub fn export_transient_slices(tau: &TransientVolume, every: usize, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    if every == 0 {
        return Err(Error::param("every", "must be positive"));
    }
    let max = tau.max();
    let mut written = Vec::new();
    for m in slice_indices(tau.frames, every) {
        let path = dir.join(format!("{prefix}_{m:05}.png"));
        atomic_write(&path, &encode_slice_png(tau.frame(m), tau.width, tau.height, max)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Maps t ∈ [0, 1] to an RGB color (blue, cyan, green, yellow, red).
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let mut rgb = [0u8; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        *out = (255.0 * (STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f)).round() as u8;
    }
    rgb
}

/// Colorized depth preview; invalid pixels are black, near is red.
pub fn encode_depth_preview(depth: &DepthMap) -> Result<Vec<u8>> {
    let masked = depth.masked_depth();
    let (lo, hi) = masked
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(to_u32(depth.width, "width")?, to_u32(depth.height, "height")?);
    for (i, p) in img.pixels_mut().enumerate() {
        let v = masked[i];
        *p = if v.is_finite() {
            Rgb(colormap(1.0 - (v - lo) / span))
        } else {
            Rgb([0, 0, 0])
        };
    }
    encode_png(image::DynamicImage::ImageRgb8(img))
}

fn encode_png(img: image::DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decodes a PNG to grayscale intensities in [0, 1], row-major.
pub fn decode_gray_image(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("cannot decode image: {e}")))?;
    let gray = img.to_luma32f();
    let (w, h) = gray.dimensions();
    Ok((w as usize, h as usize, gray.into_raw().into_iter().map(f64::from).collect()))
}

pub fn read_gray_image(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_gray_image(&fs::read(path)?)
}

/// Ordered `key=value` report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("report line {} has no `=`", n + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }
}

impl std::fmt::Display for Report {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
