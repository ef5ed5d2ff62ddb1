//! OTB-style success / precision curves, AUC and DP@20P.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hsdata::frame::BBox;
use crate::hsdata::sequence::Attribute;

/// Number of IoU thresholds 0.00, 0.05, …, 1.00.
pub const SUCCESS_STEPS: usize = 21;
/// Center-error thresholds 0..=50 px.
pub const PRECISION_MAX_PX: usize = 50;
pub const DP_THRESHOLD_PX: usize = 20;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

pub fn success_thresholds() -> Vec<f64> {
    (0..SUCCESS_STEPS).map(|i| i as f64 / (SUCCESS_STEPS - 1) as f64).collect()
}

/// A frame succeeds at threshold t when IoU > t; a perfect overlap (IoU = 1)
/// also counts at t = 1 so that exact predictions score AUC 1.
fn succeeds(iou: f64, t: f64) -> bool {
    iou > t || iou >= 1.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub rates: Vec<f64>,
}

impl Curve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,rate\n");
        for (t, r) in self.thresholds.iter().zip(&self.rates) {
            let _ = writeln!(s, "{t},{r}");
        }
        s
    }

    /// Element-wise mean of curves sharing thresholds.
    pub fn mean(curves: &[&Curve]) -> Option<Curve> {
        let first = curves.first()?;
        let n = curves.len() as f64;
        let rates = (0..first.rates.len()).map(|i| curves.iter().map(|c| c.rates[i]).sum::<f64>() / n).collect();
        Some(Curve { thresholds: first.thresholds.clone(), rates })
    }
}

/// Scores of one sequence (frame 0 excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct SeqEvaluation {
    pub frames: usize,
    pub auc: f64,
    pub dp20: f64,
    pub success: Curve,
    pub precision: Curve,
}

/// Scores predictions against ground truth, skipping the echoed frame 0.
pub fn evaluate(pred: &[BBox], gt: &[BBox]) -> Result<SeqEvaluation> {
    if pred.len() != gt.len() {
        return Err(Error::data(format!("{} predictions for {} ground-truth frames", pred.len(), gt.len())));
    }
    if gt.len() < 2 {
        return Err(Error::data("need at least two frames (frame 0 is not scored)"));
    }
    let ious: Vec<f64> = pred[1..].iter().zip(&gt[1..]).map(|(p, g)| iou(p, g)).collect();
    let errs: Vec<f64> = pred[1..].iter().zip(&gt[1..]).map(|(p, g)| center_error(p, g)).collect();
    let n = ious.len();
    let ts = success_thresholds();
    let counts: Vec<usize> = ts.iter().map(|&t| ious.iter().filter(|&&v| succeeds(v, t)).count()).collect();
    let success = Curve { thresholds: ts, rates: counts.iter().map(|&c| c as f64 / n as f64).collect() };
    let auc = counts.iter().sum::<usize>() as f64 / (SUCCESS_STEPS * n) as f64;
    let pts: Vec<f64> = (0..=PRECISION_MAX_PX).map(|t| t as f64).collect();
    let pcounts: Vec<usize> = pts.iter().map(|&t| errs.iter().filter(|&&e| e <= t).count()).collect();
    let precision = Curve { thresholds: pts, rates: pcounts.iter().map(|&c| c as f64 / n as f64).collect() };
    let dp20 = pcounts[DP_THRESHOLD_PX] as f64 / n as f64;
    Ok(SeqEvaluation { frames: n, auc, dp20, success, precision })
}

/// Benchmark-level scores: means over sequences, overall and per attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkEvaluation {
    pub sequences: BTreeMap<String, SeqEvaluation>,
    pub auc: f64,
    pub dp20: f64,
    pub success: Curve,
    pub precision: Curve,
    /// Attribute → (AUC, DP@20P, number of sequences).
    pub per_attribute: BTreeMap<Attribute, (f64, f64, usize)>,
}

pub fn aggregate(
    seqs: BTreeMap<String, SeqEvaluation>,
    attributes: &BTreeMap<String, Vec<Attribute>>,
) -> Result<BenchmarkEvaluation> {
    if seqs.is_empty() {
        return Err(Error::data("no sequences to aggregate"));
    }
    let n = seqs.len() as f64;
    let auc = seqs.values().map(|s| s.auc).sum::<f64>() / n;
    let dp20 = seqs.values().map(|s| s.dp20).sum::<f64>() / n;
    let success = Curve::mean(&seqs.values().map(|s| &s.success).collect::<Vec<_>>()).expect("non-empty");
    let precision = Curve::mean(&seqs.values().map(|s| &s.precision).collect::<Vec<_>>()).expect("non-empty");
    let mut per_attribute = BTreeMap::new();
    for a in Attribute::ALL {
        let tagged: Vec<&SeqEvaluation> = seqs
            .iter()
            .filter(|(name, _)| attributes.get(*name).is_some_and(|t| t.contains(&a)))
            .map(|(_, s)| s)
            .collect();
        if !tagged.is_empty() {
            let k = tagged.len() as f64;
            per_attribute.insert(
                a,
                (tagged.iter().map(|s| s.auc).sum::<f64>() / k, tagged.iter().map(|s| s.dp20).sum::<f64>() / k, tagged.len()),
            );
        }
    }
    Ok(BenchmarkEvaluation { sequences: seqs, auc, dp20, success, precision, per_attribute })
}

impl BenchmarkEvaluation {
    /// `summary.csv`, `attributes.csv`, `success.csv`, `precision.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let mut s = String::from("sequence,frames,auc,dp20\n");
        for (name, e) in &self.sequences {
            let _ = writeln!(s, "{name},{},{},{}", e.frames, e.auc, e.dp20);
        }
        let _ = writeln!(s, "ALL,{},{},{}", self.sequences.values().map(|e| e.frames).sum::<usize>(), self.auc, self.dp20);
        let mut a = String::from("attribute,sequences,auc,dp20\n");
        for (attr, (auc, dp, k)) in &self.per_attribute {
            let _ = writeln!(a, "{attr},{k},{auc},{dp}");
        }
        for (file, text) in [
            ("summary.csv", s),
            ("attributes.csv", a),
            ("success.csv", self.success.to_csv()),
            ("precision.csv", self.precision.to_csv()),
        ] {
            let p = dir.join(file);
            fs::write(&p, text).map_err(Error::io(&p))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 2., 2.), &b(0., 0., 2., 2.)), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(5., 5., 1., 1.)), 0.0);
        assert!((iou(&b(0., 0., 2., 2.), &b(1., 0., 2., 2.)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn exact_and_half_fixtures() {
        let gt: Vec<BBox> = (0..5).map(|i| b(10.0 * i as f64, 0., 4., 4.)).collect();
        let e = evaluate(&gt, &gt).unwrap();
        assert_eq!((e.auc, e.dp20), (1.0, 1.0));
        let mut pred = gt.clone();
        pred[3] = b(200., 200., 4., 4.);
        pred[4] = b(300., 0., 4., 4.);
        let e = evaluate(&pred, &gt).unwrap();
        assert_eq!((e.auc, e.dp20), (0.5, 0.5));
        assert!(evaluate(&pred[..3], &gt).is_err());
    }

    proptest! {
        #[test]
        fn iou_symmetric_scale_invariant(x in -5.0..5.0f64, y in -5.0..5.0f64, w in 0.1..5.0f64, h in 0.1..5.0f64,
                                         s in 0.5..4.0f64) {
            let a = b(x, y, w, h);
            let c = b(1.0, -1.0, 2.0, 3.0);
            prop_assert!((iou(&a, &c) - iou(&c, &a)).abs() < 1e-12);
            let sa = b(x * s, y * s, w * s, h * s);
            let sc = b(s, -s, 2.0 * s, 3.0 * s);
            prop_assert!((iou(&a, &c) - iou(&sa, &sc)).abs() < 1e-9);
        }

        #[test]
        fn curves_are_monotone(offsets in proptest::collection::vec(-10.0..10.0f64, 6)) {
            let gt: Vec<BBox> = (0..6).map(|i| b(i as f64, 0., 5., 5.)).collect();
            let pred: Vec<BBox> = gt.iter().zip(&offsets).map(|(g, o)| g.translate(*o, -o / 2.0)).collect();
            let e = evaluate(&pred, &gt).unwrap();
            prop_assert!(e.success.rates.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(e.precision.rates.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
