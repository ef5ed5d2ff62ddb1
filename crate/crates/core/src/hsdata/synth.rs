//! Deterministic synthetic hyperspectral tracking sequences.
//!
//! A sequence is a textured spectral background, a flat-spectrum target
//! rectangle following a motion model, and optionally a second object. In
//! `metamer` mode that object's spectrum is the target's plus a vector in
//! the null space of the sequence CMF, so both render to the same false
//! color while remaining spectrally distinct.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::hsdata::cmf::CmfMatrix;
use crate::hsdata::frame::{save_frame, BBox, HSFrame};
use crate::hsdata::sequence::{frame_file_name, write_boxes, Attribute, SequenceMeta};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistractorMode {
    None,
    Metamer,
    Clutter,
}

impl FromStr for DistractorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "metamer" => Ok(Self::Metamer),
            "clutter" => Ok(Self::Clutter),
            other => Err(Error::config(format!("unknown distractor mode `{other}`"))),
        }
    }
}

impl fmt::Display for DistractorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Metamer => "metamer",
            Self::Clutter => "clutter",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionModel {
    /// Constant velocity, reflecting at the frame margins.
    Linear,
    /// Velocity perturbed every frame, reflecting at the margins.
    RandomWalk,
}

impl FromStr for MotionModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "random_walk" => Ok(Self::RandomWalk),
            other => Err(Error::config(format!("unknown motion model `{other}`"))),
        }
    }
}

impl fmt::Display for MotionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::RandomWalk => "random_walk",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub frame_count: usize,
    pub wavelength_min: f64,
    pub wavelength_max: f64,
    pub target_w: f64,
    pub target_h: f64,
    /// Fixed target spectrum; drawn from the seed when absent.
    pub target_signature: Option<Vec<f64>>,
    pub distractor: DistractorMode,
    /// Distance of the distractor center from the target center, pixels.
    pub distractor_radius: f64,
    /// Angular speed of the distractor around the target, radians per frame.
    pub distractor_orbit_speed: f64,
    pub motion: MotionModel,
    /// Target speed, pixels per frame.
    pub speed: f64,
    /// Inclusive frame ranges during which the target is hidden.
    pub occlusion: Vec<(usize, usize)>,
    /// Standard deviation of per-pixel background noise.
    pub noise: f64,
    /// Relative amplitude of the background intensity texture.
    pub texture: f64,
    /// Peak relative darkening over the sequence (0 disables).
    pub illumination: f64,
    /// Per-frame multiplicative growth of the target size.
    pub scale_rate: f64,
    pub min_spectral_angle: f64,
    pub extra_attributes: Vec<Attribute>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            bands: 8,
            height: 64,
            width: 64,
            frame_count: 40,
            wavelength_min: 420.0,
            wavelength_max: 680.0,
            target_w: 8.0,
            target_h: 8.0,
            target_signature: None,
            distractor: DistractorMode::None,
            distractor_radius: 11.0,
            distractor_orbit_speed: 0.08,
            motion: MotionModel::Linear,
            speed: 1.0,
            occlusion: Vec::new(),
            noise: 0.02,
            texture: 0.15,
            illumination: 0.0,
            scale_rate: 0.0,
            min_spectral_angle: 0.2,
            extra_attributes: Vec::new(),
        }
    }
}

impl SynthSpec {
    /// Reads `synth.*` keys.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        Self::from_kv_over(kv, &Self::default())
    }

    /// Reads `synth.*` keys over the given defaults.
    pub fn from_kv_over(kv: &KvConfig, d: &Self) -> Result<Self> {
        let occlusion = kv
            .get_list::<String>("synth.occlusion", &[])?
            .iter()
            .map(|r| parse_range(r))
            .collect::<Result<Vec<_>>>()?;
        let sig: Vec<f64> = kv.get_list("synth.target_signature", d.target_signature.as_deref().unwrap_or(&[]))?;
        let spec = Self {
            bands: kv.get("synth.bands", d.bands)?,
            height: kv.get("synth.height", d.height)?,
            width: kv.get("synth.width", d.width)?,
            frame_count: kv.get("synth.frames", d.frame_count)?,
            wavelength_min: kv.get("synth.wavelength_min", d.wavelength_min)?,
            wavelength_max: kv.get("synth.wavelength_max", d.wavelength_max)?,
            target_w: kv.get("synth.target_w", d.target_w)?,
            target_h: kv.get("synth.target_h", d.target_h)?,
            target_signature: (!sig.is_empty()).then_some(sig),
            distractor: kv.get("synth.distractor", d.distractor)?,
            distractor_radius: kv.get("synth.distractor_radius", d.distractor_radius)?,
            distractor_orbit_speed: kv.get("synth.distractor_orbit_speed", d.distractor_orbit_speed)?,
            motion: kv.get("synth.motion", d.motion)?,
            speed: kv.get("synth.speed", d.speed)?,
            occlusion: if kv.contains("synth.occlusion") { occlusion } else { d.occlusion.clone() },
            noise: kv.get("synth.noise", d.noise)?,
            texture: kv.get("synth.texture", d.texture)?,
            illumination: kv.get("synth.illumination", d.illumination)?,
            scale_rate: kv.get("synth.scale_rate", d.scale_rate)?,
            min_spectral_angle: kv.get("synth.min_spectral_angle", d.min_spectral_angle)?,
            extra_attributes: kv.get_list("synth.extra_attributes", &d.extra_attributes)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 2 {
            return Err(Error::config("synth.frames must be at least 2"));
        }
        if self.bands < 4 {
            return Err(Error::config("synth.bands must be at least 4"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("frames must be at least 8x8"));
        }
        if !(self.target_w > 0.0 && self.target_h > 0.0) {
            return Err(Error::config("target size must be positive"));
        }
        if !(self.wavelength_min < self.wavelength_max) {
            return Err(Error::config("wavelength range is empty"));
        }
        if let Some(sig) = &self.target_signature {
            if sig.len() != self.bands || sig.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config("target signature must have C values in [0,1]"));
            }
        }
        if !(0.0..1.0).contains(&self.illumination) {
            return Err(Error::config("illumination must lie in [0,1)"));
        }
        Ok(())
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        let c = self.bands;
        (0..c)
            .map(|i| self.wavelength_min + (self.wavelength_max - self.wavelength_min) * i as f64 / (c - 1) as f64)
            .collect()
    }
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| Error::config(format!("occlusion range `{s}` must look like 10-14")))?;
    let a: usize = a.trim().parse().map_err(|_| Error::config(format!("bad range `{s}`")))?;
    let b: usize = b.trim().parse().map_err(|_| Error::config(format!("bad range `{s}`")))?;
    if a > b {
        return Err(Error::config(format!("reversed range `{s}`")));
    }
    Ok((a, b))
}

/// In-memory result of generation.
#[derive(Clone, Debug)]
pub struct SynthSequence {
    pub meta: SequenceMeta,
    pub frames: Vec<HSFrame>,
    pub groundtruth: Vec<BBox>,
    pub distractor_boxes: Option<Vec<BBox>>,
    pub target_signature: Vec<f64>,
    pub distractor_signature: Option<Vec<f64>>,
}

pub fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

const SIG_LO: f64 = 0.02;
const SIG_HI: f64 = 0.98;

/// Distractor spectrum `target + α·n` with `n` a unit null-space direction of
/// the CMF, `α` maximal subject to staying inside the unit range.
pub fn metamer_signature<R: Rng>(
    target: &[f64],
    cmf: &CmfMatrix,
    min_angle: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let c = target.len();
    if cmf.bands() != c {
        return Err(Error::Generation("CMF width differs from signature length".into()));
    }
    if c <= 3 {
        return Err(Error::Generation(format!("a {c}-band CMF has no null space; metamers need C ≥ 4")));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut best = 0.0f64;
    for _ in 0..256 {
        let v: Vec<f64> = (0..c).map(|_| normal.sample(rng)).collect();
        let Some(n) = cmf.null_space_projection(&v) else {
            return Err(Error::Generation("CMF rows are linearly dependent".into()));
        };
        let norm = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        let first_sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for sign in [first_sign, -first_sign] {
            let dir: Vec<f64> = n.iter().map(|x| sign * x / norm).collect();
            let alpha = dir
                .iter()
                .zip(target)
                .map(|(&d, &t)| {
                    if d > 0.0 {
                        (SIG_HI - t) / d
                    } else if d < 0.0 {
                        (t - SIG_LO) / -d
                    } else {
                        f64::INFINITY
                    }
                })
                .fold(f64::INFINITY, f64::min)
                .max(0.0);
            let cand: Vec<f64> = target.iter().zip(&dir).map(|(t, d)| t + alpha * d).collect();
            let angle = spectral_angle(target, &cand);
            best = best.max(angle);
            if angle >= min_angle {
                return Ok(cand);
            }
        }
    }
    Err(Error::Generation(format!(
        "no metamer reaches spectral angle {min_angle:.3} rad for this target under the given CMF \
         (best found {best:.3} rad); move the target spectrum away from the unit-range bounds or add bands"
    )))
}

fn random_signature<R: Rng>(c: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    (0..c).map(|_| rng.random_range(lo..hi)).collect()
}

fn fc_distance(cmf: &CmfMatrix, a: &[f64], b: &[f64]) -> f64 {
    let fa = cmf.apply(a);
    let fb = cmf.apply(b);
    fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn coverage(b: &BBox, y: usize, x: usize) -> f64 {
    let ox = (b.x + b.w).min(x as f64 + 1.0) - b.x.max(x as f64);
    let oy = (b.y + b.h).min(y as f64 + 1.0) - b.y.max(y as f64);
    ox.max(0.0) * oy.max(0.0)
}

fn reflect(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    if hi <= lo {
        *pos = (lo + hi) / 2.0;
        return;
    }
    if *pos < lo {
        *pos = 2.0 * lo - *pos;
        *vel = vel.abs();
    }
    if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -vel.abs();
    }
    *pos = pos.clamp(lo, hi);
}

pub fn synth_sequence(spec: &SynthSpec, seed: u64) -> Result<SynthSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (spec.bands, spec.height, spec.width);
    let wavelengths = spec.wavelengths();
    let cmf = CmfMatrix::cie_like(&wavelengths)?;

    let background = random_signature(c, 0.2, 0.8, &mut rng);
    let target = match &spec.target_signature {
        Some(s) => s.clone(),
        None => {
            let mut s = random_signature(c, 0.25, 0.75, &mut rng);
            for _ in 0..200 {
                if fc_distance(&cmf, &s, &background) >= 0.1 {
                    break;
                }
                s = random_signature(c, 0.25, 0.75, &mut rng);
            }
            s
        }
    };
    let distractor = match spec.distractor {
        DistractorMode::None => None,
        DistractorMode::Metamer => Some(metamer_signature(&target, &cmf, spec.min_spectral_angle, &mut rng)?),
        DistractorMode::Clutter => {
            let mut s = random_signature(c, 0.25, 0.75, &mut rng);
            for _ in 0..500 {
                if fc_distance(&cmf, &s, &target) >= 0.12 && fc_distance(&cmf, &s, &background) >= 0.08 {
                    break;
                }
                s = random_signature(c, 0.25, 0.75, &mut rng);
            }
            Some(s)
        }
    };

    // Background intensity texture: a few random plane waves.
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.04..0.18) * 2.0 * PI;
            (theta.cos() * freq, theta.sin() * freq, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let texture: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let t: f64 = waves.iter().map(|(kx, ky, ph)| (kx * x + ky * y + ph).sin()).sum::<f64>() / 3.0;
            1.0 + spec.texture * t
        })
        .collect();

    // Trajectory.
    let margin = spec.target_w.max(spec.target_h) / 2.0
        + if distractor.is_some() { spec.distractor_radius + spec.target_w.max(spec.target_h) / 2.0 } else { 1.0 };
    let (lo_x, hi_x) = (margin, w as f64 - margin);
    let (lo_y, hi_y) = (margin, h as f64 - margin);
    let mut cx = if hi_x > lo_x { rng.random_range(lo_x..hi_x) } else { w as f64 / 2.0 };
    let mut cy = if hi_y > lo_y { rng.random_range(lo_y..hi_y) } else { h as f64 / 2.0 };
    let heading = rng.random_range(0.0..2.0 * PI);
    let (mut vx, mut vy) = (spec.speed * heading.cos(), spec.speed * heading.sin());
    let orbit_phase = rng.random_range(0.0..2.0 * PI);
    let orbit_dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).unwrap();

    let mut frames = Vec::with_capacity(spec.frame_count);
    let mut gt = Vec::with_capacity(spec.frame_count);
    let mut dboxes = Vec::new();
    let mut occluded_any = false;
    let mut out_of_view = false;
    for t in 0..spec.frame_count {
        if t > 0 {
            if spec.motion == MotionModel::RandomWalk {
                let turn = rng.random_range(-0.5..0.5);
                let (s, co) = (f64::sin(turn), f64::cos(turn));
                (vx, vy) = (vx * co - vy * s, vx * s + vy * co);
            }
            cx += vx;
            cy += vy;
            reflect(&mut cx, &mut vx, lo_x, hi_x);
            reflect(&mut cy, &mut vy, lo_y, hi_y);
        }
        let grow = (1.0 + spec.scale_rate).powi(t as i32);
        let (tw, th) = (spec.target_w * grow, spec.target_h * grow);
        let tbox = BBox::from_center(cx, cy, tw, th)?;
        if tbox.x < 0.0 || tbox.y < 0.0 || tbox.x + tbox.w > w as f64 || tbox.y + tbox.h > h as f64 {
            out_of_view = true;
        }
        let occluded = spec.occlusion.iter().any(|&(a, b)| (a..=b).contains(&t));
        occluded_any |= occluded;
        let dbox = distractor.as_ref().map(|_| {
            let ang = orbit_phase + orbit_dir * spec.distractor_orbit_speed * t as f64;
            BBox::from_center(cx + spec.distractor_radius * ang.cos(), cy + spec.distractor_radius * ang.sin(), tw, th)
        });
        let dbox = dbox.transpose()?;

        let illum = 1.0 - spec.illumination * 0.5 * (1.0 - (2.0 * PI * t as f64 / spec.frame_count as f64).cos());
        let mut data = vec![0f32; c * h * w];
        for y in 0..h {
            for x in 0..w {
                let cov_d = dbox.as_ref().map_or(0.0, |b| coverage(b, y, x));
                let cov_t = if occluded { 0.0 } else { coverage(&tbox, y, x) };
                // target is drawn over the distractor
                let cov_d = cov_d * (1.0 - cov_t);
                let cov_bg = (1.0 - cov_t - cov_d).max(0.0);
                let tex = texture[y * w + x];
                for b in 0..c {
                    let mut v = cov_bg * (background[b] * tex + noise.sample(&mut rng));
                    v += cov_t * target[b];
                    if let Some(d) = &distractor {
                        v += cov_d * d[b];
                    }
                    data[(b * h + y) * w + x] = (v * illum).clamp(0.0, 1.0) as f32;
                }
            }
        }
        frames.push(HSFrame::new(c, h, w, data)?.with_wavelengths(wavelengths.clone())?.with_index(t as u32));
        gt.push(tbox);
        if let Some(b) = dbox {
            dboxes.push(b);
        }
    }

    let mut attributes: BTreeSet<Attribute> = spec.extra_attributes.iter().copied().collect();
    if occluded_any {
        attributes.insert(Attribute::OCC);
    }
    if distractor.is_some() {
        attributes.insert(Attribute::BC);
    }
    if spec.speed >= 0.5 * spec.target_w.min(spec.target_h) {
        attributes.insert(Attribute::FM);
    }
    let last_grow = (1.0 + spec.scale_rate).powi(spec.frame_count as i32 - 1);
    if !(0.67..=1.5).contains(&last_grow) {
        attributes.insert(Attribute::SV);
    }
    if spec.illumination > 0.0 {
        attributes.insert(Attribute::IV);
    }
    if spec.target_w * spec.target_h < 64.0 {
        attributes.insert(Attribute::LR);
    }
    if out_of_view {
        attributes.insert(Attribute::OV);
    }

    let meta = SequenceMeta {
        frame_count: spec.frame_count,
        bands: c,
        height: h,
        width: w,
        wavelengths,
        cmf,
        attributes,
    };
    meta.validate()?;
    Ok(SynthSequence {
        meta,
        frames,
        groundtruth: gt,
        distractor_boxes: distractor.as_ref().map(|_| dboxes),
        target_signature: target,
        distractor_signature: distractor,
    })
}

impl SynthSequence {
    /// Writes frames, `groundtruth.txt`, `meta.json` and, when a distractor
    /// exists, `distractor.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        for (i, f) in self.frames.iter().enumerate() {
            save_frame(f, &dir.join(frame_file_name(i)))?;
        }
        write_boxes(&dir.join("groundtruth.txt"), &self.groundtruth)?;
        if let Some(d) = &self.distractor_boxes {
            write_boxes(&dir.join("distractor.txt"), d)?;
        }
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, self.meta.to_json()?).map_err(Error::io(&meta_path))
    }
}

/// Generates and writes one sequence directory.
pub fn write_synth_sequence(spec: &SynthSpec, seed: u64, dir: &Path) -> Result<SynthSequence> {
    let seq = synth_sequence(spec, seed)?;
    seq.write(dir)?;
    Ok(seq)
}

/// Seed of the `index`-th sequence in a benchmark generated from `seed`.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 * 7919 + 1)
}

/// Writes `count` sequences as `seq_000`, `seq_001`, … under `root`.
pub fn write_benchmark(spec: &SynthSpec, count: usize, seed: u64, root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs = Vec::with_capacity(count);
    for i in 0..count {
        let dir = root.join(format!("seq_{i:03}"));
        write_synth_sequence(spec, sequence_seed(seed, i), &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsdata::cmf::to_false_color;
    use crate::hsdata::sequence::Sequence;

    fn small(distractor: DistractorMode) -> SynthSpec {
        SynthSpec { height: 32, width: 48, frame_count: 6, distractor, distractor_radius: 9.0, ..SynthSpec::default() }
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small(DistractorMode::None);
        let tmp = tempfile::tempdir().unwrap();
        write_synth_sequence(&spec, 7, &tmp.path().join("a")).unwrap();
        write_synth_sequence(&spec, 7, &tmp.path().join("b")).unwrap();
        assert_eq!(dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
        let other = synth_sequence(&spec, 8).unwrap();
        let first = synth_sequence(&spec, 7).unwrap();
        assert_ne!(other.frames[0], first.frames[0]);
    }

    #[test]
    fn written_sequence_reopens() {
        let tmp = tempfile::tempdir().unwrap();
        let s = write_synth_sequence(&small(DistractorMode::Clutter), 3, tmp.path()).unwrap();
        let seq = Sequence::open(tmp.path()).unwrap();
        assert_eq!(seq.len(), 6);
        assert_eq!(seq.groundtruth, s.groundtruth);
        assert_eq!(seq.frame(2).unwrap().data(), s.frames[2].data());
    }

    #[test]
    fn metamer_patches_render_identically() {
        let spec = small(DistractorMode::Metamer);
        for seed in 0..5 {
            let s = synth_sequence(&spec, seed).unwrap();
            let t = &s.target_signature;
            let d = s.distractor_signature.as_ref().unwrap();
            assert!(spectral_angle(t, d) >= 0.2);
            // Render-and-compare on interior pixels of both objects.
            let frame = &s.frames[0];
            let fc = to_false_color(frame, &s.meta.cmf).unwrap();
            let (tb, db) = (s.groundtruth[0], s.distractor_boxes.as_ref().unwrap()[0]);
            let interior = |b: &BBox| {
                let (x0, y0) = (b.x.ceil() as usize, b.y.ceil() as usize);
                let (x1, y1) = ((b.x + b.w).floor() as usize, (b.y + b.h).floor() as usize);
                (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (y, x))).collect::<Vec<_>>()
            };
            let tp = interior(&tb);
            let dp = interior(&db);
            assert!(!tp.is_empty() && !dp.is_empty());
            for &(ty, tx) in &tp {
                for &(dy, dx) in &dp {
                    for k in 0..3 {
                        let diff = (fc.get(k, ty, tx) - fc.get(k, dy, dx)).abs();
                        assert!(diff <= 1e-3, "seed {seed} channel {k}: {diff}");
                    }
                }
            }
            // ... while the spectra differ.
            let ts = frame.pixel(tp[0].0, tp[0].1);
            let ds = frame.pixel(dp[0].0, dp[0].1);
            assert!(spectral_angle(&ts, &ds) >= 0.19);
        }
    }

    #[test]
    fn occlusion_schedule_tags_occ() {
        let spec = SynthSpec { frame_count: 16, occlusion: vec![(10, 14)], ..small(DistractorMode::None) };
        let s = synth_sequence(&spec, 1).unwrap();
        assert!(s.meta.attributes.contains(&Attribute::OCC));
        let plain = synth_sequence(&small(DistractorMode::None), 1).unwrap();
        assert!(!plain.meta.attributes.contains(&Attribute::OCC));
    }

    #[test]
    fn infeasible_metamer_reports_diagnostic() {
        let mut spec = small(DistractorMode::Metamer);
        spec.target_signature = Some(vec![0.02; spec.bands]);
        let err = synth_sequence(&spec, 0).unwrap_err();
        assert!(matches!(&err, Error::Generation(m) if m.contains("best found")), "{err}");

        let wl: Vec<f64> = vec![450.0, 550.0, 600.0];
        let cmf = CmfMatrix::cie_like(&wl).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(metamer_signature(&[0.5; 3], &cmf, 0.2, &mut rng).is_err());
    }

    #[test]
    fn kv_spec_parses_ranges() {
        let kv = KvConfig::parse("synth.occlusion = 10-14, 20-21\nsynth.distractor = metamer\n").unwrap();
        let s = SynthSpec::from_kv(&kv).unwrap();
        assert_eq!(s.occlusion, vec![(10, 14), (20, 21)]);
        assert_eq!(s.distractor, DistractorMode::Metamer);
        kv.finish().unwrap();
    }
}
