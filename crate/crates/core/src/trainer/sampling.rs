//! Training-pair sampling: template, online template and a jittered search
//! crop drawn from one sequence.

use std::path::Path;

use rand::Rng;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::head::gt_bins;
use crate::hsdata::crop::crop_resize;
use crate::hsdata::frame::{BBox, HSFrame};
use crate::hsdata::sequence::{list_sequences, Sequence, SequenceMeta};
use crate::model::{ModelConfig, ModelInput, PairInput};

/// A sequence held in memory.
#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub name: String,
    pub meta: SequenceMeta,
    pub frames: Vec<HSFrame>,
    pub groundtruth: Vec<BBox>,
}

impl LoadedSequence {
    pub fn open(dir: &Path) -> Result<Self> {
        let seq = Sequence::open(dir)?;
        Ok(Self { name: seq.name(), frames: seq.frames()?, groundtruth: seq.groundtruth.clone(), meta: seq.meta })
    }
}

pub fn load_sequences(root: &Path) -> Result<Vec<LoadedSequence>> {
    list_sequences(root)?.iter().map(|d| LoadedSequence::open(d)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub search_context: f64,
    pub template_context: f64,
    /// Maximum search-center shift as a fraction of the search side.
    pub center_jitter: f64,
    /// Maximum log-scale jitter of the search box.
    pub scale_jitter: f64,
    /// Maximum frame distance between template and search frames.
    pub max_gap: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { search_context: 4.0, template_context: 2.0, center_jitter: 0.25, scale_jitter: 0.15, max_gap: 100 }
    }
}

impl SampleConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let s = Self {
            search_context: kv.get("crop.search_context", d.search_context)?,
            template_context: kv.get("crop.template_context", d.template_context)?,
            center_jitter: kv.get("sample.center_jitter", d.center_jitter)?,
            scale_jitter: kv.get("sample.scale_jitter", d.scale_jitter)?,
            max_gap: kv.get("sample.max_gap", d.max_gap)?,
        };
        if !(s.search_context >= 1.0 && s.template_context >= 1.0) {
            return Err(Error::config("context factors must be ≥ 1"));
        }
        if !(0.0..0.5).contains(&s.center_jitter) || s.scale_jitter < 0.0 {
            return Err(Error::config("center jitter must lie in [0, 0.5) and scale jitter be ≥ 0"));
        }
        Ok(s)
    }
}

/// Draws one training pair and its target bins. Returns `None` when the
/// jittered search region does not contain the target (skip signal).
pub fn sample_pair<R: Rng>(
    seqs: &[LoadedSequence],
    sc: &SampleConfig,
    mc: &ModelConfig,
    rng: &mut R,
) -> Result<Option<(ModelInput, [usize; 4])>> {
    if seqs.is_empty() {
        return Err(Error::data("no training sequences"));
    }
    let seq = &seqs[rng.random_range(0..seqs.len())];
    if seq.meta.bands != mc.bands {
        return Err(Error::data(format!(
            "sequence {} has {} bands but the model expects {}",
            seq.name, seq.meta.bands, mc.bands
        )));
    }
    let len = seq.frames.len();
    let ts = rng.random_range(0..len);
    let lo = ts.saturating_sub(sc.max_gap);
    let hi = (ts + sc.max_gap).min(len - 1);
    let tt = rng.random_range(lo..=hi);
    let (a, b) = (tt.min(ts), tt.max(ts));
    let to = rng.random_range(a..=b);
    let cmf = &seq.meta.cmf;
    let crop_pair = |t: usize, bbox: &BBox, ctx: f64| -> Result<(PairInput, _)> {
        let crop = crop_resize(&seq.frames[t], bbox, ctx, mc.image_size)?;
        Ok((PairInput::from_crop(&crop.cube, cmf)?, crop.geometry))
    };
    let (template, _) = crop_pair(tt, &seq.groundtruth[tt], sc.template_context)?;
    let (online, _) = crop_pair(to, &seq.groundtruth[to], sc.template_context)?;
    let gt = seq.groundtruth[ts];
    let side = sc.search_context * (gt.w * gt.h).sqrt();
    let (cx, cy) = gt.center();
    let mut jit = |m: f64| if m > 0.0 { rng.random_range(-m..m) } else { 0.0 };
    let (dx, dy) = (jit(sc.center_jitter) * side, jit(sc.center_jitter) * side);
    let s = jit(sc.scale_jitter).exp();
    let reference = BBox::from_center(cx + dx, cy + dy, gt.w * s, gt.h * s)?;
    let (search, geometry) = crop_pair(ts, &reference, sc.search_context)?;
    Ok(gt_bins(&gt, &geometry, mc.bins).map(|bins| (ModelInput { search, template, online }, bins)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsdata::synth::{synth_sequence, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seqs() -> Vec<LoadedSequence> {
        let spec = SynthSpec { frame_count: 5, ..SynthSpec::default() };
        (0..2)
            .map(|i| {
                let s = synth_sequence(&spec, i).unwrap();
                LoadedSequence { name: format!("s{i}"), meta: s.meta, frames: s.frames, groundtruth: s.groundtruth }
            })
            .collect()
    }

    #[test]
    fn samples_are_deterministic_and_shaped() {
        let data = seqs();
        let mc = ModelConfig::desk();
        let sc = SampleConfig::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_pair(&data, &sc, &mc, &mut rng).unwrap()
        };
        let (a, ta) = draw(5).unwrap();
        let (b, tb) = draw(5).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.search.hs.shape(), (8, 32 * 32));
        assert_eq!(a.template.fc.shape(), (3, 32 * 32));
        assert!(ta.iter().all(|&t| t < 16));
    }
}
