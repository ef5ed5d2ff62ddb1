//! Hyperspectral enhancement of the input (HEI, Eq. 12–14): spectral
//! attention over the flattened HS cube and parameter-free image fusion with
//! the false-color image.
//!
//! The eager functions here mirror the paper's operations one-to-one; the
//! `*_tape` variants build the same computation on an autograd [`Graph`] for
//! training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::hsdata::frame::{HSFrame, RGBImage};
use crate::tensor::Matrix;

/// `W_down ∈ R^{3×C}`, `W_up ∈ R^{C×3}`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeiParams {
    pub w_down: Matrix,
    pub w_up: Matrix,
}

impl HeiParams {
    pub fn new(w_down: Matrix, w_up: Matrix) -> Result<Self> {
        let c = w_down.cols();
        if w_down.rows() != 3 || w_up.shape() != (c, 3) {
            return Err(Error::shape(format!(
                "HEI expects 3xC and Cx3 matrices, got {:?} and {:?}",
                w_down.shape(),
                w_up.shape()
            )));
        }
        Ok(Self { w_down, w_up })
    }

    pub fn bands(&self) -> usize {
        self.w_down.cols()
    }
}

/// The Table 5 input-fusion variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeiVariant {
    /// Concatenate `[V_FRGB; V_HS]` and project back to three channels.
    ConcatDownsample,
    /// `V_FRGB + W·V_HS`.
    DownsampleAdd,
    /// `V_FRGB + W·V_SA`.
    SaDownsampleAdd,
    /// Eq. 14: `softmax(V_FRGB·V_SAᵀ)·V_SA`.
    Full,
}

impl HeiVariant {
    pub const ALL: [HeiVariant; 4] =
        [HeiVariant::ConcatDownsample, HeiVariant::DownsampleAdd, HeiVariant::SaDownsampleAdd, HeiVariant::Full];

    pub fn as_str(&self) -> &'static str {
        match self {
            HeiVariant::ConcatDownsample => "concat_downsample",
            HeiVariant::DownsampleAdd => "downsample_add",
            HeiVariant::SaDownsampleAdd => "sa_downsample_add",
            HeiVariant::Full => "full",
        }
    }

    pub fn uses_spectral_attention(&self) -> bool {
        matches!(self, HeiVariant::SaDownsampleAdd | HeiVariant::Full)
    }

    pub fn uses_projection(&self) -> bool {
        !matches!(self, HeiVariant::Full)
    }
}

impl fmt::Display for HeiVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeiVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        HeiVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown HEI variant `{s}`")))
    }
}

/// `C×H×W → C×HW`, row `c` the row-major scan of band `c` (Eq. 12).
pub fn flatten_hs(img: &HSFrame) -> Matrix {
    img.to_matrix()
}

pub fn flatten_rgb(img: &RGBImage) -> Matrix {
    img.matrix().clone()
}

/// Inverse of [`flatten_hs`]; exact for values representable in `f32`.
pub fn unflatten_hs(m: &Matrix, height: usize, width: usize, wavelengths: &[f64]) -> Result<HSFrame> {
    if m.cols() != height * width {
        return Err(Error::shape(format!("{} columns cannot form a {height}x{width} image", m.cols())));
    }
    let data = m.as_slice().iter().map(|&v| v as f32).collect();
    HSFrame::new(m.rows(), height, width, data)?.with_wavelengths(wavelengths.to_vec())
}

pub fn unflatten_rgb(m: &Matrix, height: usize, width: usize) -> Result<RGBImage> {
    RGBImage::new(height, width, m.clone())
}

/// Eq. 13: `V_SA = W_up · ReLU(W_down · V_HS)`.
pub fn spectral_attention(v_hs: &Matrix, p: &HeiParams) -> Result<Matrix> {
    if v_hs.rows() != p.bands() {
        return Err(Error::shape(format!("V_HS has {} rows but HEI expects C={}", v_hs.rows(), p.bands())));
    }
    p.w_up.matmul(&p.w_down.matmul(v_hs)?.relu())
}

/// The `3×C` row-stochastic fusion weights `softmax_C(V_FRGB · V_SAᵀ)`.
pub fn fusion_weights(v_frgb: &Matrix, v_sa: &Matrix) -> Result<Matrix> {
    if v_frgb.rows() != 3 {
        return Err(Error::shape(format!("V_FRGB must have 3 rows, got {}", v_frgb.rows())));
    }
    if v_frgb.cols() != v_sa.cols() {
        return Err(Error::shape(format!("V_FRGB has {} columns, V_SA {}", v_frgb.cols(), v_sa.cols())));
    }
    Ok(v_frgb.matmul_t(v_sa)?.softmax_rows())
}

/// Eq. 14: `V_E = softmax(V_FRGB · V_SAᵀ) · V_SA`, softmax along C.
pub fn image_fusion(v_frgb: &Matrix, v_sa: &Matrix) -> Result<Matrix> {
    fusion_weights(v_frgb, v_sa)?.matmul(v_sa)
}

/// Eq. 1 front end for one image pair. With `residual`, returns
/// `V_E + V_FRGB` (the `hei_residual` experiment flag).
pub fn enhance(hs: &HSFrame, frgb: &RGBImage, p: &HeiParams, residual: bool) -> Result<RGBImage> {
    if (hs.height(), hs.width()) != (frgb.height(), frgb.width()) {
        return Err(Error::shape("HS and false-color images differ in size"));
    }
    let v_frgb = flatten_rgb(frgb);
    let v_sa = spectral_attention(&flatten_hs(hs), p)?;
    let mut v_e = image_fusion(&v_frgb, &v_sa)?;
    if residual {
        v_e.add_assign(&v_frgb);
    }
    unflatten_rgb(&v_e, hs.height(), hs.width())
}

/// Tape handles of the HEI tensors that exist for a given variant.
#[derive(Clone, Copy, Debug)]
pub struct HeiVars {
    pub w_down: Option<Var>,
    pub w_up: Option<Var>,
    pub w_proj: Option<Var>,
}

/// Builds the enhanced `3×HW` image on the tape for any Table 5 variant.
pub fn enhance_tape(
    g: &mut Graph,
    variant: HeiVariant,
    residual: bool,
    v_hs: Var,
    v_frgb: Var,
    p: &HeiVars,
) -> Result<Var> {
    let missing = || Error::State("HEI tensor missing from parameter set".into());
    let v_sa = if variant.uses_spectral_attention() {
        let wd = p.w_down.ok_or_else(missing)?;
        let wu = p.w_up.ok_or_else(missing)?;
        let h = g.matmul(wd, v_hs)?;
        let h = g.relu(h);
        Some(g.matmul(wu, h)?)
    } else {
        None
    };
    match variant {
        HeiVariant::Full => {
            let v_sa = v_sa.ok_or_else(missing)?;
            let logits = g.matmul_t(v_frgb, v_sa)?;
            let w = g.softmax_rows(logits);
            let v_e = g.matmul(w, v_sa)?;
            if residual {
                g.add(v_e, v_frgb)
            } else {
                Ok(v_e)
            }
        }
        HeiVariant::SaDownsampleAdd => {
            let proj = g.matmul(p.w_proj.ok_or_else(missing)?, v_sa.ok_or_else(missing)?)?;
            g.add(v_frgb, proj)
        }
        HeiVariant::DownsampleAdd => {
            let proj = g.matmul(p.w_proj.ok_or_else(missing)?, v_hs)?;
            g.add(v_frgb, proj)
        }
        HeiVariant::ConcatDownsample => {
            let stacked = g.concat_rows(&[v_hs, v_frgb])?;
            g.matmul(p.w_proj.ok_or_else(missing)?, stacked)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn flatten_contracts() {
        let one = HSFrame::new(1, 1, 1, vec![0.5]).unwrap();
        assert_eq!(flatten_hs(&one), m(&[&[0.5]]));
        let sq = HSFrame::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(flatten_hs(&sq).row(0), &[0.1f32 as f64, 0.2f32 as f64, 0.3f32 as f64, 0.4f32 as f64]);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f32> = (0..4 * 64).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
        let cube = HSFrame::new(4, 8, 8, data).unwrap();
        let back = unflatten_hs(&flatten_hs(&cube), 8, 8, cube.wavelengths()).unwrap();
        assert_eq!(back, cube);
    }

    #[test]
    fn spectral_attention_examples() {
        let p = HeiParams::new(Matrix::zeros(3, 2), Matrix::zeros(2, 3)).unwrap();
        let v = m(&[&[1.0], &[2.0]]);
        assert_eq!(spectral_attention(&v, &p).unwrap(), Matrix::zeros(2, 1));

        let p = HeiParams::new(
            m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]),
            m(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]),
        )
        .unwrap();
        assert_eq!(spectral_attention(&v, &p).unwrap(), m(&[&[1.0], &[3.0]]));

        // ReLU gate: a (−1, 0) down-projection row contributes nothing.
        let p = HeiParams::new(m(&[&[-1.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]), Matrix::filled(2, 3, 1.0)).unwrap();
        assert_eq!(spectral_attention(&v, &p).unwrap(), Matrix::zeros(2, 1));
        assert!(spectral_attention(&Matrix::zeros(3, 1), &p).is_err());
    }

    #[test]
    fn image_fusion_examples() {
        let s = m(&[&[0.3, 0.7], &[0.3, 0.7], &[0.3, 0.7], &[0.3, 0.7]]);
        let frgb = m(&[&[0.1, 0.9], &[0.5, 0.2], &[0.3, 0.3]]);
        let out = image_fusion(&frgb, &s).unwrap();
        for r in 0..3 {
            assert!((out.get(r, 0) - 0.3).abs() < 1e-15 && (out.get(r, 1) - 0.7).abs() < 1e-15);
        }

        let v_sa = m(&[&[1.0], &[3.0]]);
        let out = image_fusion(&Matrix::zeros(3, 1), &v_sa).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v - 2.0).abs() < 1e-15));

        let frgb = m(&[&[1.0], &[0.0], &[0.0]]);
        let out = image_fusion(&frgb, &v_sa).unwrap();
        let e1 = 1f64.exp();
        let e3 = 3f64.exp();
        let expect = (e1 + 3.0 * e3) / (e1 + e3);
        assert!((out.get(0, 0) - expect).abs() < 1e-12);
        assert!((out.get(0, 0) - 2.7616).abs() < 1e-4);
        assert!(image_fusion(&Matrix::zeros(2, 1), &v_sa).is_err());
    }

    #[test]
    fn enhance_is_the_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hs_data: Vec<f32> = (0..5 * 16).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
        let hs = HSFrame::new(5, 4, 4, hs_data).unwrap();
        let frgb = RGBImage::new(4, 4, Matrix::randn(3, 16, 0.3, &mut rng)).unwrap();
        let p = HeiParams::new(Matrix::randn(3, 5, 0.5, &mut rng), Matrix::randn(5, 3, 0.5, &mut rng)).unwrap();
        let out = enhance(&hs, &frgb, &p, false).unwrap();
        let manual =
            image_fusion(&flatten_rgb(&frgb), &spectral_attention(&flatten_hs(&hs), &p).unwrap()).unwrap();
        assert_eq!(out.matrix(), &manual);

        let mut g = Graph::new();
        let vh = g.constant(flatten_hs(&hs));
        let vf = g.constant(flatten_rgb(&frgb));
        let vars = HeiVars {
            w_down: Some(g.constant(p.w_down.clone())),
            w_up: Some(g.constant(p.w_up.clone())),
            w_proj: None,
        };
        let t = enhance_tape(&mut g, HeiVariant::Full, false, vh, vf, &vars).unwrap();
        assert!(g.value(t).max_abs_diff(&manual) < 1e-14);
        let r = enhance(&hs, &frgb, &p, true).unwrap();
        assert!(r.matrix().max_abs_diff(&manual.add(&flatten_rgb(&frgb)).unwrap()) < 1e-15);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in HeiVariant::ALL {
            assert_eq!(v.as_str().parse::<HeiVariant>().unwrap(), v);
        }
        assert!("bogus".parse::<HeiVariant>().is_err());
    }
}
