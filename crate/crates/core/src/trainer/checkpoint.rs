//! Checkpoint files: `"HYAT"`, u32 version, u32-length-prefixed JSON model
//! config, then named tensors until end of file. Each tensor is a u32 name
//! length, the UTF-8 name, u32 rank, u32 dims, and float32 little-endian
//! values. All integers are little-endian. The digest is SHA-256 over the
//! tensor section.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Params};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"HYAT";
pub const VERSION: u32 = 1;

fn encode_tensor(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serialized tensor section for the named tensors, in the given order.
pub fn tensor_section<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Matrix)>) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, m) in tensors {
        encode_tensor(&mut out, name, m);
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of every tensor (sorted by name).
pub fn params_digest(params: &Params) -> String {
    sha256_hex(&tensor_section(params.iter()))
}

/// Digest of the named subset of tensors (sorted by name).
pub fn subset_digest<'a>(params: &Params, names: impl IntoIterator<Item = &'a String>) -> Result<String> {
    let mut names: Vec<&String> = names.into_iter().collect();
    names.sort();
    let mut bytes = Vec::new();
    for n in names {
        encode_tensor(&mut bytes, n, params.get(n)?);
    }
    Ok(sha256_hex(&bytes))
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&model.cfg)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&tensor_section(model.params.iter()));
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, encode_checkpoint(model)?).map_err(Error::io(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Model, String)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "bad magic (expected HYAT)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::format(path, format!("config block: {e}")))?;
    let section_start = r.pos;
    let mut params = Params::new();
    while !r.done() {
        let n = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("tensor rank")?;
        if !(1..=2).contains(&rank) {
            return Err(Error::format(path, format!("tensor `{name}` has rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| r.u32("tensor dims").map(|d| d as usize)).collect::<Result<_>>()?;
        let (rows, cols) = if rank == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
        let raw = r.take(rows * cols * 4, "tensor payload")?;
        let data: Vec<f64> =
            raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("tensor `{name}` holds non-finite values")));
        }
        if params.contains(&name) {
            return Err(Error::format(path, format!("duplicate tensor `{name}`")));
        }
        params.insert(name, Matrix::from_vec(rows, cols, data)?);
    }
    let digest = sha256_hex(&bytes[section_start..]);
    Ok((Model::from_parts(cfg, params)?, digest))
}

/// Loads a checkpoint; also returns the tensor-section digest.
pub fn load_checkpoint(path: &Path) -> Result<(Model, String)> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PeftConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = Model::new_base(&ModelConfig::tiny(), 3).unwrap();
        m.attach_peft(PeftConfig::full(), 4).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let (back, digest) = load_checkpoint(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(digest, params_digest(&m.params));
        assert_eq!(fs::read(&p).unwrap(), encode_checkpoint(&back).unwrap());
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let m = Model::new_base(&ModelConfig::tiny(), 3).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        let p = Path::new("x.ckpt");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad, p), Err(Error::Format { .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3], p), Err(Error::Format { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(matches!(decode_checkpoint(&v2, p), Err(Error::Format { .. })));
    }
}
