use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const HSR_MAGIC: &[u8; 4] = b"HSR1";

/// A `C × H × W` reflectance cube stored band-major at the precision of the
/// on-disk format.
#[derive(Clone, Debug, PartialEq)]
pub struct HSFrame {
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    wavelengths: Vec<f64>,
    pub frame_index: u32,
}

impl HSFrame {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!("empty cube {bands}x{height}x{width}")));
        }
        if data.len() != bands * height * width {
            return Err(Error::shape(format!(
                "{} values for a {bands}x{height}x{width} cube",
                data.len()
            )));
        }
        validate_unit_range(data.iter().map(|&v| f64::from(v)))?;
        Ok(Self {
            bands,
            height,
            width,
            data,
            wavelengths: (0..bands).map(|b| b as f64).collect(),
            frame_index: 0,
        })
    }

    pub fn with_wavelengths(mut self, wavelengths: Vec<f64>) -> Result<Self> {
        if wavelengths.len() != self.bands {
            return Err(Error::shape(format!(
                "{} wavelengths for {} bands",
                wavelengths.len(),
                self.bands
            )));
        }
        if wavelengths.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::data("wavelengths must be strictly increasing"));
        }
        self.wavelengths = wavelengths;
        Ok(self)
    }

    pub fn with_index(mut self, index: u32) -> Self {
        self.frame_index = index;
        self
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, band: usize, y: usize, x: usize) -> f32 {
        self.data[(band * self.height + y) * self.width + x]
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[band * n..(band + 1) * n]
    }

    pub fn band_means(&self) -> Vec<f64> {
        let n = (self.height * self.width) as f64;
        (0..self.bands)
            .map(|b| self.band(b).iter().map(|&v| f64::from(v)).sum::<f64>() / n)
            .collect()
    }

    /// Spectrum at one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.bands).map(|b| f64::from(self.get(b, y, x))).collect()
    }

    /// Band-major `C × (H·W)` view in `f64`.
    pub fn to_matrix(&self) -> Matrix {
        let data = self.data.iter().map(|&v| f64::from(v)).collect();
        Matrix::from_vec(self.bands, self.height * self.width, data).expect("consistent cube")
    }
}

/// Three-channel planar image, `3 × (H·W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RGBImage {
    height: usize,
    width: usize,
    data: Matrix,
}

impl RGBImage {
    pub fn new(height: usize, width: usize, data: Matrix) -> Result<Self> {
        if data.shape() != (3, height * width) {
            return Err(Error::shape(format!(
                "RGB image {height}x{width} from {:?} matrix",
                data.shape()
            )));
        }
        if !data.is_finite() {
            return Err(Error::data("non-finite RGB value"));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data.get(channel, y * self.width + x)
    }
}

/// Axis-aligned box; `x, y` is the top-left corner in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::input(format!("non-finite box {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::input(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self { x: self.x + dx, y: self.y + dy, ..*self }
    }

    /// Parses an `x,y,w,h` line.
    pub fn parse(line: &str) -> Result<Self> {
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(format!("bad box line `{line}`: {e}")))?;
        if vals.len() < 4 {
            return Err(Error::data(format!("bad box line `{line}`: expected 4 fields")));
        }
        Self::new(vals[0], vals[1], vals[2], vals[3])
    }

    pub fn to_line(&self) -> String {
        format!("{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

pub(crate) fn validate_unit_range(values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::data("non-finite value"));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::data(format!("value {v} outside [0,1]")));
        }
    }
    Ok(())
}

pub fn encode_frame(frame: &HSFrame) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + frame.data.len() * 4);
    buf.extend_from_slice(HSR_MAGIC);
    for dim in [frame.bands, frame.height, frame.width] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &frame.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_frame(bytes: &[u8], path: &Path) -> Result<HSFrame> {
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != HSR_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let expected = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(path, "dimension overflow"))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload of {} bytes does not match C,H,W = {c},{h},{w}", payload.len()),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::format(path, "zero dimension"));
    }
    HSFrame::new(c, h, w, data)
}

pub fn save_frame(frame: &HSFrame, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(&encode_frame(frame)).map_err(Error::io(path))
}

pub fn load_frame(path: &Path) -> Result<HSFrame> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_frame(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_frame_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.hsr");
        let vals: Vec<f32> = (0..16).map(|i| i as f32 / 15.0).collect();
        let f = HSFrame::new(4, 2, 2, vals.clone()).unwrap();
        save_frame(&f, &p).unwrap();
        let g = load_frame(&p).unwrap();
        assert_eq!(g.data(), &vals[..]);
        assert_eq!((g.bands(), g.height(), g.width()), (4, 2, 2));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let f = HSFrame::new(4, 2, 2, vec![0.5; 16]).unwrap();
        let mut bytes = encode_frame(&f);
        bytes[3] = b'2';
        let err = decode_frame(&bytes, Path::new("x.hsr")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let f = HSFrame::new(4, 2, 2, vec![0.5; 16]).unwrap();
        let bytes = encode_frame(&f);
        let err = decode_frame(&bytes[..bytes.len() - 1], Path::new("x.hsr")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let err = decode_frame(&bytes[..10], Path::new("x.hsr")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn out_of_range_and_nan_are_data_errors() {
        let mut f = encode_frame(&HSFrame::new(4, 1, 1, vec![0.5; 4]).unwrap());
        f[16..20].copy_from_slice(&1.5f32.to_le_bytes());
        assert!(matches!(decode_frame(&f, Path::new("a")), Err(Error::Data(_))));
        f[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_frame(&f, Path::new("a")), Err(Error::Data(_))));
    }

    #[test]
    fn full_size_frame_shape() {
        let f = HSFrame::new(16, 256, 256, vec![0.25; 16 * 256 * 256]).unwrap();
        let g = decode_frame(&encode_frame(&f), Path::new("big")).unwrap();
        assert_eq!((g.bands(), g.height(), g.width()), (16, 256, 256));
    }

    #[test]
    fn box_line_round_trip() {
        let b = BBox::new(1.5, -2.0, 3.25, 4.0).unwrap();
        assert_eq!(BBox::parse(&b.to_line()).unwrap(), b);
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn hsr_round_trip_is_bit_exact(
            (c, h, w, vals) in (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(c, h, w)| {
                (Just(c), Just(h), Just(w), proptest::collection::vec(0.0f32..=1.0, c * h * w))
            })
        ) {
            let f = HSFrame::new(c, h, w, vals).unwrap();
            let g = decode_frame(&encode_frame(&f), Path::new("p")).unwrap();
            let a: Vec<u32> = f.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = g.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
