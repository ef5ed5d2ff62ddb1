use crate::error::{Error, Result};
use crate::hsdata::frame::{BBox, HSFrame};

/// Maps between a square crop's normalized `[0,1]²` coordinates and frame
/// pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropGeometry {
    /// Top-left corner of the crop square in frame pixels.
    pub x0: f64,
    pub y0: f64,
    /// Side length of the crop square in frame pixels.
    pub side: f64,
    /// Output resolution in pixels.
    pub out_size: usize,
}

impl CropGeometry {
    pub fn around(bbox: &BBox, context_factor: f64, out_size: usize) -> Result<Self> {
        bbox.validate()?;
        if !(context_factor >= 1.0) {
            return Err(Error::config(format!("context factor {context_factor} < 1")));
        }
        if out_size == 0 {
            return Err(Error::config("crop output size must be positive"));
        }
        let side = context_factor * (bbox.w * bbox.h).sqrt();
        let (cx, cy) = bbox.center();
        Ok(Self { x0: cx - side / 2.0, y0: cy - side / 2.0, side, out_size })
    }

    pub fn to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        (self.x0 + u * self.side, self.y0 + v * self.side)
    }

    pub fn to_normalized(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) / self.side, (y - self.y0) / self.side)
    }

    /// Box in normalized crop coordinates as `(cx, cy, w, h)`.
    pub fn normalize_box(&self, b: &BBox) -> [f64; 4] {
        let (cx, cy) = b.center();
        let (u, v) = self.to_normalized(cx, cy);
        [u, v, b.w / self.side, b.h / self.side]
    }

    pub fn denormalize_box(&self, cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        let (x, y) = self.to_frame(cx, cy);
        BBox { x: x - w * self.side / 2.0, y: y - h * self.side / 2.0, w: w * self.side, h: h * self.side }
    }

    pub fn region(&self) -> BBox {
        BBox { x: self.x0, y: self.y0, w: self.side, h: self.side }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub cube: HSFrame,
    pub geometry: CropGeometry,
}

/// Square crop of side `context_factor · sqrt(w·h)` centered on the box,
/// bilinearly resampled to `out_size²` with half-pixel centers. Samples that
/// fall outside the frame read the per-band mean of the source frame.
pub fn crop_resize(frame: &HSFrame, bbox: &BBox, context_factor: f64, out_size: usize) -> Result<Crop> {
    let geometry = CropGeometry::around(bbox, context_factor, out_size)?;
    let cube = resample(frame, &geometry)?;
    Ok(Crop { cube, geometry })
}

pub fn resample(frame: &HSFrame, g: &CropGeometry) -> Result<HSFrame> {
    let (c, h, w) = (frame.bands(), frame.height(), frame.width());
    let means = frame.band_means();
    let n = g.out_size;
    let step = g.side / n as f64;
    // Per output column/row: the two source indices and the right-hand weight.
    let taps = |origin: f64, limit: usize| -> Vec<(Option<usize>, Option<usize>, f64)> {
        (0..n)
            .map(|j| {
                let s = origin + (j as f64 + 0.5) * step - 0.5;
                let lo = s.floor();
                let f = s - lo;
                let idx = |k: f64| (k >= 0.0 && k < limit as f64).then_some(k as usize);
                (idx(lo), idx(lo + 1.0), f)
            })
            .collect()
    };
    let xs = taps(g.x0, w);
    let ys = taps(g.y0, h);
    let mut out = Vec::with_capacity(c * n * n);
    for (b, &mean) in means.iter().enumerate() {
        let band = frame.band(b);
        let at = |y: Option<usize>, x: Option<usize>| match (y, x) {
            (Some(y), Some(x)) => f64::from(band[y * w + x]),
            _ => mean,
        };
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let v = if y0.is_none() && y1.is_none() || x0.is_none() && x1.is_none() {
                    mean
                } else {
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    top * (1.0 - fy) + bot * fy
                };
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(HSFrame::new(c, n, n, out)?
        .with_wavelengths(frame.wavelengths().to_vec())?
        .with_index(frame.frame_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(c: usize, h: usize, w: usize, seed: u64) -> HSFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.random::<f32>()).collect();
        HSFrame::new(c, h, w, data).unwrap()
    }

    #[test]
    fn full_frame_context_is_identity() {
        let f = random_frame(4, 16, 16, 1);
        let b = BBox::new(4.0, 4.0, 8.0, 8.0).unwrap();
        let crop = crop_resize(&f, &b, 2.0, 16).unwrap();
        assert_eq!(crop.cube.data(), f.data());
    }

    #[test]
    fn corner_box_pads_with_band_mean() {
        let f = random_frame(3, 12, 12, 2);
        let means = f.band_means();
        let b = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let crop = crop_resize(&f, &b, 4.0, 8).unwrap();
        // Crop spans [-3, 5)² with unit step; rows/cols 0..2 sample outside.
        for band in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let src_x = -3.0 + x as f64;
                    let src_y = -3.0 + y as f64;
                    let v = f64::from(crop.cube.get(band, y, x));
                    if src_x < 0.0 || src_y < 0.0 {
                        assert!((v - means[band]).abs() < 1e-6, "band {band} ({y},{x})");
                    } else {
                        assert_eq!(crop.cube.get(band, y, x), f.get(band, src_y as usize, src_x as usize));
                    }
                }
            }
        }
    }

    #[test]
    fn full_config_crops_are_256() {
        let f = random_frame(2, 64, 64, 3);
        let b = BBox::new(20.0, 20.0, 10.0, 12.0).unwrap();
        for ctx in [4.0, 2.0] {
            let crop = crop_resize(&f, &b, ctx, 256).unwrap();
            assert_eq!((crop.cube.height(), crop.cube.width()), (256, 256));
        }
    }

    #[test]
    fn degenerate_box_is_input_error() {
        let f = random_frame(2, 8, 8, 4);
        let b = BBox { x: 1.0, y: 1.0, w: 0.0, h: 2.0 };
        assert!(matches!(crop_resize(&f, &b, 2.0, 8), Err(Error::Input(_))));
    }

    #[test]
    fn translation_consistent_away_from_padding() {
        let big = random_frame(3, 40, 40, 5);
        let shift = 5usize;
        let mut shifted = Vec::new();
        for c in 0..3 {
            for y in 0..40 {
                for x in 0..40 {
                    let (sy, sx) = (y as isize - shift as isize, x as isize - shift as isize);
                    let v = if sy >= 0 && sx >= 0 { big.get(c, sy as usize, sx as usize) } else { 0.5 };
                    shifted.push(v);
                }
            }
        }
        let moved = HSFrame::new(3, 40, 40, shifted).unwrap();
        let b = BBox::new(14.3, 12.7, 6.0, 5.0).unwrap();
        let a = crop_resize(&big, &b, 2.0, 12).unwrap();
        let m = crop_resize(&moved, &b.translate(shift as f64, shift as f64), 2.0, 12).unwrap();
        for (x, y) in a.cube.data().iter().zip(m.cube.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn horizontal_flip_equivariance() {
        let f = random_frame(2, 10, 10, 6);
        let mut flipped = Vec::new();
        for c in 0..2 {
            for y in 0..10 {
                for x in 0..10 {
                    flipped.push(f.get(c, y, 9 - x));
                }
            }
        }
        let ff = HSFrame::new(2, 10, 10, flipped).unwrap();
        let b = BBox::new(3.2, 2.0, 3.0, 4.0).unwrap();
        let bf = BBox { x: 10.0 - b.x - b.w, ..b };
        let a = crop_resize(&f, &b, 1.5, 7).unwrap();
        let m = crop_resize(&ff, &bf, 1.5, 7).unwrap();
        for c in 0..2 {
            for y in 0..7 {
                for x in 0..7 {
                    let d = (a.cube.get(c, y, x) - m.cube.get(c, y, 6 - x)).abs();
                    assert!(d < 1e-6);
                }
            }
        }
    }

    #[test]
    fn geometry_round_trips_boxes() {
        let b = BBox::new(10.0, 20.0, 6.0, 8.0).unwrap();
        let g = CropGeometry::around(&b, 4.0, 32).unwrap();
        let [cx, cy, w, h] = g.normalize_box(&b);
        assert!((cx - 0.5).abs() < 1e-12 && (cy - 0.5).abs() < 1e-12);
        let back = g.denormalize_box(cx, cy, w, h);
        assert!((back.x - b.x).abs() < 1e-9 && (back.h - b.h).abs() < 1e-9);
    }
}
