//! Binary PNM (P5/P6) raster I/O, green-channel extraction, FOV masks,
//! normalization and zero padding.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Raw raster as read from or written to a PNM file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// 8 or 16 bits per sample.
    pub depth: u32,
    /// Row-major, interleaved samples.
    pub data: Vec<u16>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, depth: u32, data: Vec<u16>) -> Result<Self> {
        let img = RasterImage {
            width,
            height,
            channels,
            depth,
            data,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn maxval(&self) -> u32 {
        (1u32 << self.depth) - 1
    }

    fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.depth != 8 && self.depth != 16 {
            return Err(Error::InvalidArgument(format!(
                "depth must be 8 or 16, got {}",
                self.depth
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("zero-sized raster".into()));
        }
        let expected = self.width * self.height * self.channels;
        if self.data.len() != expected {
            return Err(Error::Dimensions(format!(
                "raster data has {} samples, expected {expected}",
                self.data.len()
            )));
        }
        let max = self.maxval();
        if let Some(v) = self.data.iter().find(|&&v| u32::from(v) > max) {
            return Err(Error::InvalidArgument(format!("sample {v} exceeds maxval {max}")));
        }
        Ok(())
    }
}

/// Single-channel real-valued image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T: Real = f64> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
}

impl<T: Real> Plane<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Dimensions(format!(
                "plane {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Plane { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Plane {
            width,
            height,
            values: vec![T::zero(); width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Plane { width, height, values }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.values[y * self.width + x] = v;
    }

    pub fn same_dims(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Plane {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Field-of-view mask; `true` marks pixels inside the retina.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FovMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl FovMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Dimensions(format!(
                "mask {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::Degenerate("FOV mask has no pixel inside".into()));
        }
        Ok(FovMask { width, height, bits })
    }

    pub fn full(width: usize, height: usize) -> Self {
        FovMask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    /// Samples at or above half the maximum value count as inside
    /// (≥128 for 8-bit masks).
    pub fn from_raster(img: &RasterImage) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::InvalidArgument("FOV mask must be a grayscale (P5) image".into()));
        }
        let cut = (img.maxval() + 1) / 2;
        let bits = img.data.iter().map(|&v| u32::from(v) >= cut).collect();
        FovMask::new(img.width, img.height, bits)
    }

    pub fn to_raster(&self) -> RasterImage {
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            depth: 8,
            data: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    #[inline]
    pub fn inside(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

// ---------------------------------------------------------------------------
// PNM codec
// ---------------------------------------------------------------------------

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::PnmHeader(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::PnmHeader(format!("{what} out of range")))
    }
}

/// Parses a binary P5 or P6 file. 16-bit samples are big-endian.
pub fn read_pnm(bytes: &[u8]) -> Result<RasterImage> {
    if bytes.len() < 2 {
        return Err(Error::PnmHeader("file too short for magic number".into()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        b"P1" | b"P2" | b"P3" | b"P4" | b"P7" => {
            return Err(Error::PnmUnsupported(format!(
                "magic {} (only binary P5/P6 are accepted)",
                String::from_utf8_lossy(&bytes[..2])
            )))
        }
        other => {
            return Err(Error::PnmHeader(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(other)
            )));
        }
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    let depth = match maxval {
        255 => 8,
        65535 => 16,
        m => return Err(Error::PnmUnsupported(format!("maxval {m} (expected 255 or 65535)"))),
    };
    if width == 0 || height == 0 {
        return Err(Error::PnmHeader("zero width or height".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::PnmHeader("missing whitespace after maxval".into())),
    }
    let samples = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::PnmHeader("dimensions overflow".into()))?;
    let bytes_per = if depth == 16 { 2 } else { 1 };
    let payload = &bytes[cur.pos..];
    let expected = samples * bytes_per;
    if payload.len() < expected {
        return Err(Error::PnmTruncated {
            expected,
            found: payload.len(),
        });
    }
    let data: Vec<u16> = if depth == 16 {
        payload[..expected]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        payload[..expected].iter().map(|&b| u16::from(b)).collect()
    };
    RasterImage::new(width, height, channels, depth, data)
}

/// Serializes with the canonical header `P5\n<w> <h>\n<maxval>\n` (or `P6`).
pub fn write_pnm(image: &RasterImage) -> Vec<u8> {
    let magic = if image.channels == 3 { "P6" } else { "P5" };
    let header = format!("{magic}\n{} {}\n{}\n", image.width, image.height, image.maxval());
    let mut out = Vec::with_capacity(header.len() + image.data.len() * 2);
    out.extend_from_slice(header.as_bytes());
    if image.depth == 16 {
        for &v in &image.data {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(image.data.iter().map(|&v| v as u8));
    }
    out
}

pub fn read_pnm_file(path: &Path) -> Result<RasterImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    read_pnm(&bytes)
}

pub fn write_pnm_file(path: &Path, image: &RasterImage) -> Result<()> {
    std::fs::write(path, write_pnm(image)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

// ---------------------------------------------------------------------------
// Plane conversions
// ---------------------------------------------------------------------------

/// Green samples of an RGB raster, or the sole channel of a grayscale one.
pub fn green_channel<T: Real>(image: &RasterImage) -> Plane<T> {
    let values = if image.channels == 3 {
        image
            .data
            .chunks_exact(3)
            .map(|px| T::from_u16(px[1]).unwrap())
            .collect()
    } else {
        image.data.iter().map(|&v| T::from_u16(v).unwrap()).collect()
    };
    Plane {
        width: image.width,
        height: image.height,
        values,
    }
}

/// Binary labels (1 where sample ≥ half of maxval) from a grayscale truth mask.
pub fn labels_from_raster<T: Real>(image: &RasterImage) -> Result<Plane<T>> {
    if image.channels != 1 {
        return Err(Error::InvalidArgument("label mask must be grayscale".into()));
    }
    let cut = (image.maxval() + 1) / 2;
    Ok(Plane {
        width: image.width,
        height: image.height,
        values: image
            .data
            .iter()
            .map(|&v| if u32::from(v) >= cut { T::one() } else { T::zero() })
            .collect(),
    })
}

/// Probabilities in [0,1] as a 16-bit P5 raster, `round(p * 65535)`.
pub fn probability_raster<T: Real>(plane: &Plane<T>) -> RasterImage {
    let data = plane
        .values
        .iter()
        .map(|&p| {
            let p = p.to_f64_lossy().clamp(0.0, 1.0);
            (p * 65535.0).round() as u16
        })
        .collect();
    RasterImage {
        width: plane.width,
        height: plane.height,
        channels: 1,
        depth: 16,
        data,
    }
}

/// {0,1} plane as an 8-bit P5 raster with values {0,255}.
pub fn binary_raster<T: Real>(plane: &Plane<T>) -> RasterImage {
    RasterImage {
        width: plane.width,
        height: plane.height,
        channels: 1,
        depth: 8,
        data: plane
            .values
            .iter()
            .map(|&v| if v > T::zero() { 255 } else { 0 })
            .collect(),
    }
}

/// Mean and population standard deviation over the masked pixels
/// (all pixels when `mask` is `None`).
pub fn masked_stats<T: Real>(plane: &Plane<T>, mask: Option<&FovMask>) -> Result<(T, T)> {
    if let Some(m) = mask {
        if m.width != plane.width || m.height != plane.height {
            return Err(Error::Dimensions(format!(
                "mask {}x{} vs plane {}x{}",
                m.width, m.height, plane.width, plane.height
            )));
        }
    }
    let selected = |i: usize| mask.map_or(true, |m| m.bits[i]);
    let mut count = 0usize;
    let mut sum = T::zero();
    for (i, &v) in plane.values.iter().enumerate() {
        if selected(i) {
            sum += v;
            count += 1;
        }
    }
    if count < 2 {
        return Err(Error::Degenerate(format!(
            "{count} pixel(s) selected for normalization"
        )));
    }
    let n = T::from_usize_lossy(count);
    let mean = sum / n;
    let mut ss = T::zero();
    for (i, &v) in plane.values.iter().enumerate() {
        if selected(i) {
            let d = v - mean;
            ss += d * d;
        }
    }
    Ok((mean, (ss / n).sqrt()))
}

/// Zero mean and unit (population) variance over the masked region; the
/// affine map is applied to every pixel of the plane.
pub fn normalize<T: Real>(plane: &Plane<T>, mask: Option<&FovMask>) -> Result<Plane<T>> {
    let (mean, sd) = masked_stats(plane, mask)?;
    if !(sd > T::zero()) || !sd.is_finite() {
        return Err(Error::Degenerate("constant region, standard deviation is zero".into()));
    }
    let out = plane.map(|v| (v - mean) / sd);
    // one corrective pass removes the rounding residue of the first
    let (m2, s2) = masked_stats(&out, mask)?;
    Ok(out.map(|v| (v - m2) / s2))
}

pub fn pad_zero<T: Real>(plane: &Plane<T>, left: usize, right: usize, top: usize, bottom: usize) -> Plane<T> {
    let width = plane.width + left + right;
    let height = plane.height + top + bottom;
    let mut out = Plane::zeros(width, height);
    for y in 0..plane.height {
        let src = &plane.values[y * plane.width..(y + 1) * plane.width];
        let start = (y + top) * width + left;
        out.values[start..start + plane.width].copy_from_slice(src);
    }
    out
}
