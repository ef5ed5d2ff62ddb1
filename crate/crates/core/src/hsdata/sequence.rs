use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsdata::cmf::CmfMatrix;
use crate::hsdata::frame::{load_frame, BBox, HSFrame};
use crate::tensor::Matrix;

/// The eleven challenge attribute tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    OV,
    LR,
    BC,
    MB,
    FM,
    IPR,
    OPR,
    SV,
    IV,
    OCC,
    DEF,
}

impl Attribute {
    pub const ALL: [Attribute; 11] = [
        Attribute::OV,
        Attribute::LR,
        Attribute::BC,
        Attribute::MB,
        Attribute::FM,
        Attribute::IPR,
        Attribute::OPR,
        Attribute::SV,
        Attribute::IV,
        Attribute::OCC,
        Attribute::DEF,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Attribute::OV => "OV",
            Attribute::LR => "LR",
            Attribute::BC => "BC",
            Attribute::MB => "MB",
            Attribute::FM => "FM",
            Attribute::IPR => "IPR",
            Attribute::OPR => "OPR",
            Attribute::SV => "SV",
            Attribute::IV => "IV",
            Attribute::OCC => "OCC",
            Attribute::DEF => "DEF",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::data(format!("unknown attribute tag `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMeta {
    pub frame_count: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub wavelengths: Vec<f64>,
    pub cmf: CmfMatrix,
    pub attributes: BTreeSet<Attribute>,
}

#[derive(Serialize, Deserialize)]
struct MetaJson {
    frame_count: usize,
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    wavelengths: Vec<f64>,
    cmf: Vec<Vec<f64>>,
    attributes: Vec<String>,
}

impl SequenceMeta {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 2 {
            return Err(Error::data(format!("frame_count {} < 2", self.frame_count)));
        }
        if self.bands < 4 {
            return Err(Error::data(format!("{} bands; at least 4 are required", self.bands)));
        }
        if self.cmf.bands() != self.bands || self.wavelengths.len() != self.bands {
            return Err(Error::data("CMF / wavelength count disagrees with C"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let j = MetaJson {
            frame_count: self.frame_count,
            c: self.bands,
            h: self.height,
            w: self.width,
            wavelengths: self.wavelengths.clone(),
            cmf: self.cmf.to_rows(),
            attributes: self.attributes.iter().map(ToString::to_string).collect(),
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: MetaJson = serde_json::from_str(text)?;
        let cmf = CmfMatrix::new(Matrix::from_rows(&j.cmf)?)?;
        let attributes = j.attributes.iter().map(|s| s.parse()).collect::<Result<BTreeSet<_>>>()?;
        let meta = Self {
            frame_count: j.frame_count,
            bands: j.c,
            height: j.h,
            width: j.w,
            wavelengths: j.wavelengths,
            cmf,
            attributes,
        };
        meta.validate()?;
        Ok(meta)
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:04}.hsr")
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut text = String::new();
    for b in boxes {
        text.push_str(&b.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(Error::io(path))
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(BBox::parse).collect()
}

/// A sequence directory: `NNNN.hsr` frames, `groundtruth.txt`, `meta.json`.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub dir: PathBuf,
    pub meta: SequenceMeta,
    pub groundtruth: Vec<BBox>,
}

impl Sequence {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(Error::io(&meta_path))?;
        let meta = SequenceMeta::from_json(&text)?;
        let groundtruth = read_boxes(&dir.join("groundtruth.txt"))?;
        if groundtruth.len() != meta.frame_count {
            return Err(Error::data(format!(
                "{}: groundtruth has {} lines but meta declares {} frames",
                dir.display(),
                groundtruth.len(),
                meta.frame_count
            )));
        }
        let frames = (0..meta.frame_count).filter(|&i| dir.join(frame_file_name(i)).is_file()).count();
        if frames != meta.frame_count {
            return Err(Error::data(format!(
                "{}: found {frames} frame files but meta declares {}",
                dir.display(),
                meta.frame_count
            )));
        }
        Ok(Self { dir: dir.to_path_buf(), meta, groundtruth })
    }

    pub fn name(&self) -> String {
        self.dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.meta.frame_count
    }

    pub fn is_empty(&self) -> bool {
        self.meta.frame_count == 0
    }

    pub fn frame(&self, index: usize) -> Result<HSFrame> {
        let f = load_frame(&self.dir.join(frame_file_name(index)))?;
        if (f.bands(), f.height(), f.width()) != (self.meta.bands, self.meta.height, self.meta.width) {
            return Err(Error::data(format!("frame {index} shape disagrees with meta.json")));
        }
        Ok(f.with_wavelengths(self.meta.wavelengths.clone())?.with_index(index as u32))
    }

    pub fn frames(&self) -> Result<Vec<HSFrame>> {
        (0..self.len()).map(|i| self.frame(i)).collect()
    }
}

/// Sorted sub-directories of `root` that contain a `meta.json`.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("meta.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(Error::io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::data(format!("no sequences under {}", root.display())));
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribute_vocabulary_round_trips() {
        for a in Attribute::ALL {
            assert_eq!(a.as_str().parse::<Attribute>().unwrap(), a);
        }
        assert!("XYZ".parse::<Attribute>().is_err());
    }

    #[test]
    fn meta_json_round_trips_and_validates() {
        let wl: Vec<f64> = (0..4).map(|i| 450.0 + 50.0 * i as f64).collect();
        let meta = SequenceMeta {
            frame_count: 3,
            bands: 4,
            height: 5,
            width: 6,
            cmf: CmfMatrix::cie_like(&wl).unwrap(),
            wavelengths: wl,
            attributes: [Attribute::OCC, Attribute::BC].into_iter().collect(),
        };
        let text = meta.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["C", "H", "W", "attributes", "cmf", "frame_count", "wavelengths"].into_iter().collect());
        assert_eq!(SequenceMeta::from_json(&text).unwrap(), meta);

        let bad = text.replace("\"OCC\"", "\"NOPE\"");
        assert!(SequenceMeta::from_json(&bad).is_err());
    }
}
