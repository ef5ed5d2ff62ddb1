use crate::error::{Error, Result};
use crate::hsdata::frame::{HSFrame, RGBImage};
use crate::tensor::Matrix;

/// Row-normalized nonnegative `3 × C` band weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CmfMatrix {
    weights: Matrix,
}

impl CmfMatrix {
    pub fn new(weights: Matrix) -> Result<Self> {
        if weights.rows() != 3 || weights.cols() == 0 {
            return Err(Error::shape(format!("CMF must be 3xC, got {:?}", weights.shape())));
        }
        if weights.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::data("CMF entries must be finite and nonnegative"));
        }
        for r in 0..3 {
            let s: f64 = weights.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::data(format!("CMF row {r} sums to {s}, expected 1")));
            }
        }
        Ok(Self { weights })
    }

    /// Normalizes each row of a nonnegative matrix to sum 1.
    pub fn normalized(mut weights: Matrix) -> Result<Self> {
        if weights.rows() != 3 {
            return Err(Error::shape("CMF must have 3 rows"));
        }
        for r in 0..3 {
            let s: f64 = weights.row(r).iter().sum();
            if !(s > 0.0) {
                return Err(Error::data(format!("CMF row {r} has no positive weight")));
            }
            for v in weights.row_mut(r) {
                *v /= s;
            }
        }
        Self::new(weights)
    }

    pub fn identity3() -> Self {
        Self { weights: Matrix::identity(3) }
    }

    /// CIE-1931-like curves sampled at the band centers, using the
    /// piecewise-Gaussian fits of the standard observer.
    pub fn cie_like(wavelengths: &[f64]) -> Result<Self> {
        fn g(l: f64, mu: f64, s1: f64, s2: f64) -> f64 {
            let s = if l < mu { s1 } else { s2 };
            (-0.5 * ((l - mu) / s).powi(2)).exp()
        }
        let c = wavelengths.len();
        let mut w = Matrix::zeros(3, c);
        for (i, &l) in wavelengths.iter().enumerate() {
            let x = 1.056 * g(l, 599.8, 37.9, 31.0) + 0.362 * g(l, 442.0, 16.0, 26.7)
                - 0.065 * g(l, 501.1, 20.4, 26.2);
            let y = 0.821 * g(l, 568.8, 46.9, 40.5) + 0.286 * g(l, 530.9, 16.3, 31.1);
            let z = 1.217 * g(l, 437.0, 11.8, 36.0) + 0.681 * g(l, 459.0, 26.0, 13.8);
            w.set(0, i, x.max(0.0));
            w.set(1, i, y.max(0.0));
            w.set(2, i, z.max(0.0));
        }
        Self::normalized(w)
    }

    pub fn bands(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..3).map(|r| self.weights.row(r).to_vec()).collect()
    }

    /// Renders one spectrum.
    pub fn apply(&self, spectrum: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.weights.row(k).iter().zip(spectrum).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// Projects `v` onto the null space of the weight matrix:
    /// `v − Wᵀ(WWᵀ)⁻¹W v`. Returns `None` when `WWᵀ` is singular.
    pub fn null_space_projection(&self, v: &[f64]) -> Option<Vec<f64>> {
        let w = &self.weights;
        let gram = w.matmul_t(w).ok()?;
        let inv = invert3(&gram)?;
        let wv: Vec<f64> = (0..3).map(|r| w.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect();
        let coef: Vec<f64> = (0..3).map(|r| (0..3).map(|k| inv[r][k] * wv[k]).sum()).collect();
        Some(
            (0..w.cols())
                .map(|c| v[c] - (0..3).map(|r| w.get(r, c) * coef[r]).sum::<f64>())
                .collect(),
        )
    }
}

fn invert3(m: &Matrix) -> Option<[[f64; 3]; 3]> {
    let a = |r: usize, c: usize| m.get(r, c);
    let cof = [
        [a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1), a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2), a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1)],
        [a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2), a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0), a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2)],
        [a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0), a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1), a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0)],
    ];
    let det = a(0, 0) * cof[0][0] + a(0, 1) * cof[1][0] + a(0, 2) * cof[2][0];
    let scale = m.max_abs().powi(3);
    if !(det.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            inv[r][c] = cof[r][c] / det;
        }
    }
    Some(inv)
}

/// `out[k] = Σ_c cmf[k,c] · frame[c]` per pixel.
pub fn to_false_color(frame: &HSFrame, cmf: &CmfMatrix) -> Result<RGBImage> {
    if cmf.bands() != frame.bands() {
        return Err(Error::shape(format!(
            "CMF has {} columns but frame has {} bands",
            cmf.bands(),
            frame.bands()
        )));
    }
    let rgb = cmf.weights.matmul(&frame.to_matrix())?;
    // Convex combinations of [0,1] values can overshoot 1 by an ulp.
    let rgb = rgb.map(|v| v.clamp(0.0, 1.0));
    RGBImage::new(frame.height(), frame.width(), rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_cmf_passes_bands_through() {
        let vals: Vec<f32> = (0..12).map(|i| i as f32 / 12.0).collect();
        let f = HSFrame::new(3, 2, 2, vals.clone()).unwrap();
        let rgb = to_false_color(&f, &CmfMatrix::identity3()).unwrap();
        for (a, b) in rgb.matrix().as_slice().iter().zip(&vals) {
            assert_eq!(*a, f64::from(*b));
        }
    }

    #[test]
    fn four_band_dot_product() {
        let cmf = CmfMatrix::new(
            Matrix::from_rows(&[vec![0.5, 0.5, 0.0, 0.0], vec![0.0, 0.5, 0.5, 0.0], vec![0.0, 0.0, 0.5, 0.5]])
                .unwrap(),
        )
        .unwrap();
        let f = HSFrame::new(4, 1, 1, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let rgb = to_false_color(&f, &cmf).unwrap();
        // Oracle: hand dot products in f64 of the f32-stored inputs.
        let v: Vec<f64> = [0.2f32, 0.4, 0.6, 0.8].iter().map(|&x| f64::from(x)).collect();
        let expect = [0.5 * v[0] + 0.5 * v[1], 0.5 * v[1] + 0.5 * v[2], 0.5 * v[2] + 0.5 * v[3]];
        for k in 0..3 {
            assert!((rgb.get(k, 0, 0) - expect[k]).abs() < 1e-15);
        }
        assert!((rgb.get(0, 0, 0) - 0.3).abs() < 1e-6);
        assert!((rgb.get(1, 0, 0) - 0.5).abs() < 1e-6);
        assert!((rgb.get(2, 0, 0) - 0.7).abs() < 1e-6);
    }

    #[test]
    fn sixteen_band_frame_renders_three_channels() {
        let wl: Vec<f64> = (0..16).map(|i| 470.0 + 10.0 * i as f64).collect();
        let cmf = CmfMatrix::cie_like(&wl).unwrap();
        let f = HSFrame::new(16, 8, 8, vec![0.5; 16 * 64]).unwrap();
        let rgb = to_false_color(&f, &cmf).unwrap();
        assert_eq!(rgb.matrix().shape(), (3, 64));
    }

    #[test]
    fn mismatched_band_count_is_shape_error() {
        let f = HSFrame::new(4, 1, 1, vec![0.5; 4]).unwrap();
        assert!(matches!(to_false_color(&f, &CmfMatrix::identity3()), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_cmfs_rejected() {
        assert!(CmfMatrix::new(Matrix::filled(3, 4, 0.5)).is_err());
        let mut w = Matrix::filled(3, 2, 0.5);
        w.set(0, 0, 1.5);
        w.set(0, 1, -0.5);
        assert!(CmfMatrix::new(w).is_err());
    }

    #[test]
    fn null_space_projection_is_invisible() {
        let wl: Vec<f64> = (0..8).map(|i| 420.0 + 37.0 * i as f64).collect();
        let cmf = CmfMatrix::cie_like(&wl).unwrap();
        let v: Vec<f64> = (0..8).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let n = cmf.null_space_projection(&v).unwrap();
        for k in cmf.apply(&n) {
            assert!(k.abs() < 1e-12);
        }
        // idempotent
        let nn = cmf.null_space_projection(&n).unwrap();
        for (a, b) in n.iter().zip(&nn) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn row_normalized_cmf_keeps_unit_range(vals in proptest::collection::vec(0.0f32..=1.0, 6 * 9)) {
            let wl: Vec<f64> = (0..6).map(|i| 430.0 + 45.0 * i as f64).collect();
            let cmf = CmfMatrix::cie_like(&wl).unwrap();
            let f = HSFrame::new(6, 3, 3, vals).unwrap();
            let rgb = to_false_color(&f, &cmf).unwrap();
            prop_assert!(rgb.matrix().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
