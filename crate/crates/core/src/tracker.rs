//! Frame-by-frame inference with windowed decoding and the confidence-gated
//! online-template update (Eq. 4, `Temp_upd`).

use std::fs;
use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::head::{box_from_logits, BoxLogits};
use crate::hsdata::cmf::CmfMatrix;
use crate::hsdata::crop::{crop_resize, CropGeometry};
use crate::hsdata::frame::{BBox, HSFrame};
use crate::model::{Model, ModelInput, PairInput};

/// Anything that maps a three-pair input to box logits.
pub trait Predictor {
    fn image_size(&self) -> usize;
    fn predict(&self, input: &ModelInput) -> Result<BoxLogits>;
}

impl Predictor for Model {
    fn image_size(&self) -> usize {
        self.cfg.image_size
    }

    fn predict(&self, input: &ModelInput) -> Result<BoxLogits> {
        Model::predict(self, input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackConfig {
    pub search_context: f64,
    pub template_context: f64,
    /// Update threshold τ on the confidence S.
    pub tau: f64,
    /// Hanning window weight λ.
    pub lambda: f64,
    /// Online-template updates are considered only every k-th frame.
    pub update_interval: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { search_context: 4.0, template_context: 2.0, tau: 0.7, lambda: 0.3, update_interval: 1 }
    }
}

impl TrackConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            search_context: kv.get("crop.search_context", d.search_context)?,
            template_context: kv.get("crop.template_context", d.template_context)?,
            tau: kv.get("track.tau", d.tau)?,
            lambda: kv.get("track.lambda", d.lambda)?,
            update_interval: kv.get("track.update_interval", d.update_interval)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.search_context >= 1.0 && self.template_context >= 1.0) {
            return Err(Error::config("context factors must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("window weight λ = {} outside [0,1]", self.lambda)));
        }
        if self.tau.is_nan() {
            return Err(Error::config("update threshold τ is NaN"));
        }
        if self.update_interval == 0 {
            return Err(Error::config("update interval must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub current_box: BBox,
    pub confidence: f64,
    /// First-frame template; never replaced.
    pub template: PairInput,
    pub online_template: PairInput,
    pub frame_index: usize,
    pub update_count: usize,
    /// Search region of the last step in frame coordinates.
    pub last_search: Option<CropGeometry>,
    pub cfg: TrackConfig,
    frame_size: (usize, usize),
}

fn crop_pair(frame: &HSFrame, bbox: &BBox, ctx: f64, size: usize, cmf: &CmfMatrix) -> Result<(PairInput, CropGeometry)> {
    let crop = crop_resize(frame, bbox, ctx, size)?;
    Ok((PairInput::from_crop(&crop.cube, cmf)?, crop.geometry))
}

/// Captures the template from the first frame.
pub fn init(frame: &HSFrame, bbox: &BBox, image_size: usize, cmf: &CmfMatrix, cfg: &TrackConfig) -> Result<TrackState> {
    cfg.validate()?;
    bbox.validate()?;
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    let (cx, cy) = bbox.center();
    if !(0.0..=w).contains(&cx) || !(0.0..=h).contains(&cy) || bbox.w > 4.0 * w || bbox.h > 4.0 * h {
        return Err(Error::input(format!("initial box {bbox:?} lies outside the {w}×{h} frame")));
    }
    let (template, _) = crop_pair(frame, bbox, cfg.template_context, image_size, cmf)?;
    Ok(TrackState {
        current_box: *bbox,
        confidence: 1.0,
        online_template: template.clone(),
        template,
        frame_index: 0,
        update_count: 0,
        last_search: None,
        cfg: cfg.clone(),
        frame_size: (frame.width(), frame.height()),
    })
}

/// Intersection of `b` with `r`, kept non-degenerate.
fn clip(b: &BBox, r: &BBox) -> BBox {
    let x0 = b.x.clamp(r.x, r.x + r.w);
    let y0 = b.y.clamp(r.y, r.y + r.h);
    let x1 = (b.x + b.w).clamp(r.x, r.x + r.w);
    let y1 = (b.y + b.h).clamp(r.y, r.y + r.h);
    let min = 1e-3 * r.w.min(r.h);
    let (w, h) = ((x1 - x0).max(min), (y1 - y0).max(min));
    BBox { x: x0.min(r.x + r.w - w), y: y0.min(r.y + r.h - h), w, h }
}

fn intersect(a: &BBox, b: &BBox) -> BBox {
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = (a.x + a.w).min(b.x + b.w);
    let y1 = (a.y + a.h).min(b.y + b.h);
    BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
}

/// Replaces the online template when `confidence > τ` (and the frame falls
/// on the update interval); returns whether it was replaced.
pub fn maybe_update_template(
    state: &mut TrackState,
    frame: &HSFrame,
    confidence: f64,
    image_size: usize,
    cmf: &CmfMatrix,
) -> Result<bool> {
    let on_interval = state.frame_index % state.cfg.update_interval == 0;
    if !(confidence > state.cfg.tau && on_interval) {
        return Ok(false);
    }
    let (pair, _) = crop_pair(frame, &state.current_box, state.cfg.template_context, image_size, cmf)?;
    state.online_template = pair;
    state.update_count += 1;
    Ok(true)
}

/// One tracking step: crop, predict, decode with the window, clip, update.
pub fn track_step<P: Predictor + ?Sized>(
    state: &mut TrackState,
    frame: &HSFrame,
    predictor: &P,
    cmf: &CmfMatrix,
) -> Result<(BBox, f64)> {
    if (frame.width(), frame.height()) != state.frame_size {
        return Err(Error::input("frame size differs from the initialization frame"));
    }
    let size = predictor.image_size();
    let (search, geometry) = crop_pair(frame, &state.current_box, state.cfg.search_context, size, cmf)?;
    let input = ModelInput { search, template: state.template.clone(), online: state.online_template.clone() };
    let logits = predictor.predict(&input)?;
    let raw = box_from_logits(&logits, state.cfg.lambda, &geometry)?;
    let (fw, fh) = (state.frame_size.0 as f64, state.frame_size.1 as f64);
    let region = intersect(&geometry.region(), &BBox { x: 0.0, y: 0.0, w: fw, h: fh });
    let bbox = if region.w > 0.0 && region.h > 0.0 { clip(&raw, &region) } else { clip(&raw, &geometry.region()) };
    state.current_box = bbox;
    state.confidence = logits.confidence.clamp(0.0, 1.0);
    state.frame_index += 1;
    state.last_search = Some(geometry);
    maybe_update_template(state, frame, state.confidence, size, cmf)?;
    Ok((bbox, state.confidence))
}

/// Per-frame prediction; frame 0 echoes the ground truth with confidence 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub boxes: Vec<BBox>,
    pub confidences: Vec<f64>,
    pub updates: usize,
}

pub fn run_frames<P: Predictor + ?Sized>(
    frames: &[HSFrame],
    init_box: &BBox,
    predictor: &P,
    cmf: &CmfMatrix,
    cfg: &TrackConfig,
) -> Result<TrackResult> {
    let first = frames.first().ok_or_else(|| Error::data("empty sequence"))?;
    let mut state = init(first, init_box, predictor.image_size(), cmf, cfg)?;
    let mut boxes = vec![*init_box];
    let mut confidences = vec![1.0];
    for frame in &frames[1..] {
        let (b, c) = track_step(&mut state, frame, predictor, cmf)?;
        boxes.push(b);
        confidences.push(c);
    }
    Ok(TrackResult { boxes, confidences, updates: state.update_count })
}

/// Tracks a sequence directory.
pub fn run_sequence<P: Predictor + ?Sized>(dir: &Path, predictor: &P, cfg: &TrackConfig) -> Result<TrackResult> {
    let seq = crate::hsdata::sequence::Sequence::open(dir)?;
    let frames = seq.frames()?;
    if frames.len() != seq.meta.frame_count {
        return Err(Error::data(format!("{} frames on disk, meta declares {}", frames.len(), seq.meta.frame_count)));
    }
    run_frames(&frames, &seq.groundtruth[0], predictor, &seq.meta.cmf, cfg)
}

pub fn format_results(r: &TrackResult) -> String {
    r.boxes.iter().zip(&r.confidences).map(|(b, c)| format!("{},{c}\n", b.to_line())).collect()
}

pub fn write_results(path: &Path, r: &TrackResult) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, format_results(r)).map_err(Error::io(path))
}

/// Reads `x,y,w,h,confidence` lines.
pub fn read_results(path: &Path) -> Result<Vec<(BBox, f64)>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let b = BBox::parse(l)?;
            let conf = l
                .split(',')
                .nth(4)
                .ok_or_else(|| Error::data(format!("result line `{l}` lacks a confidence")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::data(format!("result line `{l}`: {e}")))?;
            Ok((b, conf))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsdata::synth::{synth_sequence, SynthSpec};
    use std::cell::Cell;

    /// Fixed logits, optionally with a scripted confidence sequence.
    struct Fixed {
        size: usize,
        peak: [usize; 4],
        bins: usize,
        sharp: f64,
        confs: Vec<f64>,
        calls: Cell<usize>,
    }

    impl Predictor for Fixed {
        fn image_size(&self) -> usize {
            self.size
        }
        fn predict(&self, _: &ModelInput) -> Result<BoxLogits> {
            let mut row = vec![0.0; 4 * self.bins];
            for k in 0..4 {
                row[k * self.bins + self.peak[k]] = self.sharp;
            }
            let mut l = BoxLogits::from_row(&row)?;
            let i = self.calls.get();
            self.calls.set(i + 1);
            if let Some(&c) = self.confs.get(i) {
                l.confidence = c;
            }
            Ok(l)
        }
    }

    fn fixed(peak: [usize; 4], confs: Vec<f64>) -> Fixed {
        Fixed { size: 16, peak, bins: 16, sharp: 30.0, confs, calls: Cell::new(0) }
    }

    fn seq(frames: usize) -> crate::hsdata::synth::SynthSequence {
        synth_sequence(&SynthSpec { frame_count: frames, speed: 0.0, ..SynthSpec::default() }, 1).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_online_equals_template() {
        let s = seq(2);
        let cfg = TrackConfig::default();
        let a = init(&s.frames[0], &s.groundtruth[0], 16, &s.meta.cmf, &cfg).unwrap();
        let b = init(&s.frames[0], &s.groundtruth[0], 16, &s.meta.cmf, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.online_template, a.template);
        assert_eq!(a.confidence, 1.0);
        assert!(init(&s.frames[0], &BBox { w: 0.0, ..s.groundtruth[0] }, 16, &s.meta.cmf, &cfg).is_err());
    }

    #[test]
    fn lambda_one_pins_center_and_boxes_stay_in_region() {
        let s = seq(4);
        let cfg = TrackConfig { lambda: 1.0, ..TrackConfig::default() };
        let (c0x, c0y) = s.groundtruth[0].center();
        let p = fixed([0, 15, 2, 2], vec![]);
        let r = run_frames(&s.frames, &s.groundtruth[0], &p, &s.meta.cmf, &cfg).unwrap();
        for b in &r.boxes[1..] {
            let (cx, cy) = b.center();
            assert!((cx - c0x).abs() < 1e-9 && (cy - c0y).abs() < 1e-9, "{b:?}");
        }
        let p = fixed([15, 15, 15, 15], vec![]);
        let cfg0 = TrackConfig { lambda: 0.0, ..TrackConfig::default() };
        let mut st = init(&s.frames[0], &s.groundtruth[0], 16, &s.meta.cmf, &cfg0).unwrap();
        for f in &s.frames[1..] {
            let (b, _) = track_step(&mut st, f, &p, &s.meta.cmf).unwrap();
            let reg = st.last_search.unwrap().region();
            assert!(b.x >= reg.x - 1e-9 && b.y >= reg.y - 1e-9);
            assert!(b.x + b.w <= reg.x + reg.w + 1e-9 && b.y + b.h <= reg.y + reg.h + 1e-9);
        }
    }

    #[test]
    fn stationary_peaked_center_keeps_box() {
        let s = seq(3);
        let gt = s.groundtruth[0];
        // Box side / search side = 1/4; bins 16 → w,h bin 3.5/16 ≈ 0.22.
        let p = fixed([7, 7, 3, 3], vec![]);
        let cfg = TrackConfig::default();
        let r = run_frames(&s.frames, &gt, &p, &s.meta.cmf, &cfg).unwrap();
        let quantum = 4.0 * (gt.w * gt.h).sqrt() / 16.0;
        for b in &r.boxes[1..] {
            let (cx, cy) = b.center();
            let (gx, gy) = gt.center();
            assert!((cx - gx).abs() <= quantum && (cy - gy).abs() <= quantum, "{b:?} vs {gt:?}");
        }
    }

    #[test]
    fn update_gate_counts_high_frames() {
        let s = seq(9);
        let confs = vec![0.9, 0.1, 0.9, 0.1, 0.9, 0.1, 0.9, 0.1];
        let p = fixed([7, 7, 3, 3], confs);
        let cfg = TrackConfig::default();
        let r = run_frames(&s.frames, &s.groundtruth[0], &p, &s.meta.cmf, &cfg).unwrap();
        assert_eq!(r.updates, 4);
        let never = TrackConfig { tau: f64::INFINITY, ..cfg.clone() };
        assert_eq!(run_frames(&s.frames, &s.groundtruth[0], &fixed([7, 7, 3, 3], vec![]), &s.meta.cmf, &never).unwrap().updates, 0);
        let always = TrackConfig { tau: f64::NEG_INFINITY, ..cfg };
        assert_eq!(run_frames(&s.frames, &s.groundtruth[0], &fixed([7, 7, 3, 3], vec![]), &s.meta.cmf, &always).unwrap().updates, 8);
        let mut st = init(&s.frames[0], &s.groundtruth[0], 16, &s.meta.cmf, &TrackConfig::default()).unwrap();
        let before = st.clone();
        assert!(!maybe_update_template(&mut st, &s.frames[1], 0.0, 16, &s.meta.cmf).unwrap());
        assert_eq!(st, before);
        assert!(maybe_update_template(&mut st, &s.frames[1], 1.0, 16, &s.meta.cmf).unwrap());
        assert_eq!(st.template, before.template);
    }

    #[test]
    fn results_round_trip_and_two_frames() {
        let s = seq(2);
        let r = run_frames(&s.frames, &s.groundtruth[0], &fixed([7, 7, 3, 3], vec![]), &s.meta.cmf, &TrackConfig::default()).unwrap();
        assert_eq!(r.boxes.len(), 2);
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("r.txt");
        write_results(&p, &r).unwrap();
        let back = read_results(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, s.groundtruth[0]);
        assert_eq!(back[1].1, r.confidences[1]);
    }
}
