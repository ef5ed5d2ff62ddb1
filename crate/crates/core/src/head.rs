//! Binned-coordinate box head standing in for the SeqTrack decoder (Eq. 4):
//! attention pooling over the search tokens, a linear map to four `B`-bin
//! distributions `(cx, cy, w, h)`, soft-argmax decoding with an optional
//! Hanning prior on the center, and a cross-entropy training loss.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::hsdata::crop::CropGeometry;
use crate::hsdata::frame::BBox;
use crate::tensor::{softmax_in_place, Matrix};

/// Frozen head weights: pooling query `1×D`, projection `D×4B`, bias `1×4B`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub query: Matrix,
    pub w: Matrix,
    pub b: Matrix,
}

impl HeadParams {
    pub fn bins(&self) -> usize {
        self.w.cols() / 4
    }
}

/// Four logit vectors of length `B` and the confidence `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxLogits {
    pub logits: [Vec<f64>; 4],
    pub confidence: f64,
}

impl BoxLogits {
    /// Splits a `1×4B` logit row; `S` is the geometric mean of the four
    /// maximum softmax probabilities.
    pub fn from_row(row: &[f64]) -> Result<Self> {
        if row.len() < 8 || row.len() % 4 != 0 {
            return Err(Error::shape(format!("{} logits cannot form four coordinates of ≥2 bins", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite box logits"));
        }
        let b = row.len() / 4;
        let logits: [Vec<f64>; 4] = std::array::from_fn(|k| row[k * b..(k + 1) * b].to_vec());
        let log_conf: f64 = logits
            .iter()
            .map(|l| probabilities(l).into_iter().fold(0.0, f64::max).ln())
            .sum::<f64>()
            / 4.0;
        Ok(Self { logits, confidence: log_conf.exp() })
    }

    pub fn bins(&self) -> usize {
        self.logits[0].len()
    }
}

pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// `np.hanning(B + 2)[1:-1]`, normalized to sum 1 (strictly positive).
pub fn hann(bins: usize) -> Vec<f64> {
    let m = (bins + 1) as f64;
    let w: Vec<f64> = (1..=bins).map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / m).cos()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

pub fn bin_center(b: usize, bins: usize) -> f64 {
    (b as f64 + 0.5) / bins as f64
}

fn soft_argmax(p: &[f64]) -> f64 {
    let bins = p.len();
    p.iter().enumerate().map(|(b, &pb)| pb * bin_center(b, bins)).sum()
}

/// Eq. 4 decoder on the `N×D` search slice.
pub fn decode(f_s: &Matrix, p: &HeadParams, n: usize) -> Result<BoxLogits> {
    if f_s.rows() != n {
        return Err(Error::shape(format!("search slice has {} tokens, expected N = {n}", f_s.rows())));
    }
    let mut g = Graph::new();
    let fs = g.constant(f_s.clone());
    let (q, w, b) = (g.constant(p.query.clone()), g.constant(p.w.clone()), g.constant(p.b.clone()));
    let out = head_tape(&mut g, fs, q, w, b)?;
    BoxLogits::from_row(g.value(out).row(0))
}

/// Tape form of [`decode`], returning the `1×4B` logit row.
pub fn head_tape(g: &mut Graph, f_s: Var, query: Var, w: Var, b: Var) -> Result<Var> {
    let d = g.value(f_s).cols();
    let scores = g.matmul_t(query, f_s)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let alpha = g.softmax_rows(scores);
    let pooled = g.matmul(alpha, f_s)?;
    let logits = g.matmul(pooled, w)?;
    g.add_row(logits, b)
}

/// Normalized `[cx, cy, w, h]` from the logits with the center distributions
/// mixed as `(1−λ)·p + λ·hann`.
pub fn normalized_box(l: &BoxLogits, lambda: f64) -> Result<[f64; 4]> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("window weight λ = {lambda} outside [0,1]")));
    }
    let window = hann(l.bins());
    Ok(std::array::from_fn(|k| {
        let mut p = probabilities(&l.logits[k]);
        if k < 2 && lambda > 0.0 {
            for (pb, hb) in p.iter_mut().zip(&window) {
                *pb = (1.0 - lambda) * *pb + lambda * hb;
            }
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
        }
        soft_argmax(&p)
    }))
}

/// Soft-argmax box in frame pixels.
pub fn box_from_logits(l: &BoxLogits, lambda: f64, geometry: &CropGeometry) -> Result<BBox> {
    let [cx, cy, w, h] = normalized_box(l, lambda)?;
    Ok(geometry.denormalize_box(cx, cy, w, h))
}

/// Ground-truth bin per coordinate, or `None` when the box is not
/// expressible inside the search region (the skip-sample signal).
pub fn gt_bins(gt: &BBox, geometry: &CropGeometry, bins: usize) -> Option<[usize; 4]> {
    let v = geometry.normalize_box(gt);
    let inside = (0.0..=1.0).contains(&v[0]) && (0.0..=1.0).contains(&v[1]) && v[2] <= 1.0 && v[3] <= 1.0;
    inside.then(|| v.map(|c| ((c * bins as f64).floor().max(0.0) as usize).min(bins - 1)))
}

/// Mean cross-entropy over the four coordinates; `None` to skip the sample.
pub fn ce_loss(l: &BoxLogits, gt: &BBox, geometry: &CropGeometry) -> Option<f64> {
    let targets = gt_bins(gt, geometry, l.bins())?;
    let total: f64 = l.logits.iter().zip(targets).map(|(lg, t)| -probabilities(lg)[t].ln()).sum();
    Some(total / 4.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> CropGeometry {
        CropGeometry { x0: 10.0, y0: 20.0, side: 32.0, out_size: 32 }
    }

    fn one_hot(bins: usize, idx: [usize; 4], gap: f64) -> BoxLogits {
        let mut row = vec![0.0; 4 * bins];
        for (k, &i) in idx.iter().enumerate() {
            row[k * bins + i] = gap;
        }
        BoxLogits::from_row(&row).unwrap()
    }

    #[test]
    fn confidence_limits() {
        let u = BoxLogits::from_row(&[0.0; 64]).unwrap();
        assert!((u.confidence - 1.0 / 16.0).abs() < 1e-12);
        let peaked = one_hot(16, [3, 4, 5, 6], 60.0);
        assert!(peaked.confidence > 1.0 - 1e-12);
        let mid = one_hot(16, [3, 4, 5, 6], 2.0);
        assert!(u.confidence < mid.confidence && mid.confidence < peaked.confidence);
        assert!(BoxLogits::from_row(&[0.0; 4]).is_err());
    }

    #[test]
    fn uniform_logits_center_the_box() {
        let u = BoxLogits::from_row(&[0.0; 64]).unwrap();
        let v = normalized_box(&u, 0.0).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn window_weight_behaviour() {
        let l = one_hot(16, [2, 13, 4, 4], 50.0);
        let v = normalized_box(&l, 0.0).unwrap();
        assert!((v[0] - 2.5 / 16.0).abs() < 1e-12 && (v[1] - 13.5 / 16.0).abs() < 1e-12);
        let pinned = normalized_box(&l, 1.0).unwrap();
        assert!((pinned[0] - 0.5).abs() < 1e-12 && (pinned[1] - 0.5).abs() < 1e-12);
        // w and h are never windowed
        assert_eq!(pinned[2], v[2]);
        assert!(normalized_box(&l, 1.5).is_err());
        assert!(normalized_box(&l, -0.1).is_err());
        let b = box_from_logits(&l, 0.0, &geometry()).unwrap();
        assert!((b.center().0 - (10.0 + 32.0 * 2.5 / 16.0)).abs() < 1e-9);
    }

    #[test]
    fn hann_matches_numpy() {
        // np.hanning(6)[1:-1] = [0.3454915, 0.9045085, 0.9045085, 0.3454915]
        let h = hann(4);
        let raw = [0.345_491_502_812_526_3, 0.904_508_497_187_473_7, 0.904_508_497_187_473_7, 0.345_491_502_812_526_3];
        let s: f64 = raw.iter().sum();
        for (a, b) in h.iter().zip(raw) {
            assert!((a - b / s).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_loss_examples() {
        let g = geometry();
        let gt = g.denormalize_box(0.5, 0.5, 0.25, 0.25);
        let u = BoxLogits::from_row(&[0.0; 64]).unwrap();
        assert!((ce_loss(&u, &gt, &g).unwrap() - 16f64.ln()).abs() < 1e-12);
        let bins = gt_bins(&gt, &g, 16).unwrap();
        assert_eq!(bins, [8, 8, 4, 4]);
        let peaked = one_hot(16, bins, 40.0);
        assert!(ce_loss(&peaked, &gt, &g).unwrap() < 1e-12);
        // shift invariance on one coordinate
        let mut row: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = ce_loss(&BoxLogits::from_row(&row).unwrap(), &gt, &g).unwrap();
        row[16..32].iter_mut().for_each(|v| *v += 5.0);
        let b = ce_loss(&BoxLogits::from_row(&row).unwrap(), &gt, &g).unwrap();
        assert!((a - b).abs() < 1e-12);
        // outside → skip
        let far = BBox::new(500.0, 500.0, 4.0, 4.0).unwrap();
        assert!(ce_loss(&u, &far, &g).is_none());
    }

    #[test]
    fn one_hot_decoding_inverts_binning() {
        let g = geometry();
        for &(cx, cy) in &[(0.1, 0.9), (0.37, 0.52), (0.99, 0.01)] {
            let gt = g.denormalize_box(cx, cy, 0.3, 0.2);
            let bins = gt_bins(&gt, &g, 16).unwrap();
            let b = box_from_logits(&one_hot(16, bins, 60.0), 0.0, &g).unwrap();
            let (px, py) = b.center();
            let (gx, gy) = gt.center();
            let q = g.side / 16.0 / 2.0;
            assert!((px - gx).abs() <= q + 1e-9 && (py - gy).abs() <= q + 1e-9);
        }
    }
}
