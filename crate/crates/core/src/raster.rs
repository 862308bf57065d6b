//! Dense `C×H×W` real-valued grids and their on-disk formats.
//!
//! One raster type serves as image, latent and feature map. Values are held
//! as `f64` in channel-major, row-major order. Two file formats are
//! supported:
//!
//! * `.png`: 8-bit, 1/3/4 channels, values mapped to `[0, 1]`.
//! * `.cvt`: magic `CVLT`, three little-endian `u32` (C, H, W), then `C·H·W`
//!   little-endian `f32` values.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

const CVT_MAGIC: &[u8; 4] = b"CVLT";
const CVT_HEADER_LEN: usize = 16;
/// Largest element count accepted from a file header.
const MAX_ELEMENTS: u64 = 1 << 31;

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        check_dims(channels, height, width)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("fill value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        })
    }

    /// Wraps `data` (channel-major, row-major) after validating length and finiteness.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(channels, height, width)?;
        if data.len() != channels * height * width {
            return Err(Error::InvalidShape(format!(
                "data length {} != {}×{}×{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("element {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        check_dims(channels, height, width)?;
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_vec(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    /// Sets one element. Non-finite values are rejected to keep the raster invariant.
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("set({c},{y},{x})")));
        }
        let i = self.index(c, y, x);
        self.data[i] = value;
        Ok(())
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_same_shape(&self, other: &Raster) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// Elementwise map; fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Raster> {
        Raster::from_vec(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Elementwise combination of two same-shape rasters.
    pub fn zip_map(&self, other: &Raster, f: impl Fn(f64, f64) -> f64) -> Result<Raster> {
        self.ensure_same_shape(other)?;
        Raster::from_vec(
            self.channels,
            self.height,
            self.width,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    /// `a·self + b·other`.
    pub fn axpby(&self, a: f64, other: &Raster, b: f64) -> Result<Raster> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn scale(&self, a: f64) -> Result<Raster> {
        self.map(|v| a * v)
    }

    pub fn dot(&self, other: &Raster) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let p = self.plane(c);
        p.iter().sum::<f64>() / p.len() as f64
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Raster {
        Raster {
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
            ..self.clone()
        }
    }

    /// Copies the `size_h×size_w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, size_h: usize, size_w: usize) -> Result<Raster> {
        if y0 + size_h > self.height || x0 + size_w > self.width || size_h == 0 || size_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {size_h}×{size_w} at ({y0},{x0}) exceeds {}×{}",
                self.height, self.width
            )));
        }
        Raster::from_fn(self.channels, size_h, size_w, |c, y, x| {
            self.get(c, y0 + y, x0 + x)
        })
    }

    /// Keeps rows `[y0, H)`.
    pub fn rows_from(&self, y0: usize) -> Result<Raster> {
        self.crop(y0, 0, self.height - y0.min(self.height), self.width)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Raster> {
        let path = path.as_ref();
        match extension(path).as_deref() {
            Some("cvt") => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                decode_cvt(&bytes)
            }
            Some("png") => read_png(path),
            other => Err(Error::UnsupportedFormat(other.unwrap_or("").to_string())),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match extension(path).as_deref() {
            Some("cvt") => {
                let bytes = encode_cvt(self);
                let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
                f.write_all(&bytes).map_err(|e| Error::io(path, e))
            }
            Some("png") => write_png(self, path),
            other => Err(Error::UnsupportedFormat(other.unwrap_or("").to_string())),
        }
    }
}

fn check_dims(channels: usize, height: usize, width: usize) -> Result<()> {
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidShape(format!(
            "zero dimension in {channels}×{height}×{width}"
        )));
    }
    channels
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::DimensionOverflow(format!("{channels}×{height}×{width}")))?;
    Ok(())
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

/// Serializes to the `.cvt` byte layout. Values are narrowed to `f32`.
pub fn encode_cvt(r: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(CVT_HEADER_LEN + 4 * r.len());
    out.extend_from_slice(CVT_MAGIC);
    for d in [r.channels, r.height, r.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &r.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_cvt(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < CVT_HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "{} bytes, header needs {CVT_HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..4] != CVT_MAGIC {
        return Err(Error::MalformedHeader("bad magic".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::MalformedHeader(format!("zero dimension {c}×{h}×{w}")));
    }
    let n = (c as u64).saturating_mul(h as u64).saturating_mul(w as u64);
    if n > MAX_ELEMENTS {
        return Err(Error::DimensionOverflow(format!("{c}×{h}×{w}")));
    }
    let n = n as usize;
    let payload = &bytes[CVT_HEADER_LEN..];
    if payload.len() < 4 * n {
        return Err(Error::TruncatedPayload);
    }
    let data = payload[..4 * n]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Raster::from_vec(c as usize, h as usize, w as usize, data)
}

fn read_png(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img.color().channel_count() {
        1 => (1, img.into_luma8().into_raw()),
        2 | 4 => (4, img.into_rgba8().into_raw()),
        _ => (3, img.into_rgb8().into_raw()),
    };
    Raster::from_fn(channels, h, w, |c, y, x| {
        bytes[(y * w + x) * channels + c] as f64 / 255.0
    })
}

fn write_png(r: &Raster, path: &Path) -> Result<()> {
    let color = match r.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        n => return Err(Error::UnsupportedChannels(n)),
    };
    let mut buf = Vec::with_capacity(r.len());
    for y in 0..r.height {
        for x in 0..r.width {
            for c in 0..r.channels {
                buf.push(quantize(r.get(c, y, x)));
            }
        }
    }
    image::save_buffer(path, &buf, r.width as u32, r.height as u32, color).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other.to_string()),
    })
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
