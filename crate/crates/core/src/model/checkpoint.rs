//! Binary checkpoint format.
//!
//! ```text
//! magic         8 bytes  "DFPCKPT\0"
//! version       u32 le
//! spec_len      u32 le
//! spec          spec_len bytes of JSON (ModelSpec)
//! tensor_count  u32 le
//! per tensor:   name_len u32 le, name utf-8, rank u32 le, dims u64 le × rank,
//!               values f64 le × product(dims)
//! checksum      32 bytes, SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Architecture, ModelError, ModelParams, ModelSpec, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DFPCKPT\0";
const CHECKSUM_LEN: usize = 32;

fn ckpt_err(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(spec: &ModelSpec, params: &ModelParams, path: &Path) -> Result<()> {
    spec.validate()?;
    params.check_against(spec)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let spec_json = serde_json::to_vec(spec).map_err(|e| ckpt_err(path, e.to_string()))?;
    buf.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec_json);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = Sha256::digest(&buf);
    buf.extend_from_slice(&checksum);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ckpt_err(self.path, "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, ModelParams)> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint file"));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
        path,
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(
            path,
            format!("version {version} unsupported (expected {CHECKPOINT_VERSION})"),
        ));
    }
    if Sha256::digest(body).as_slice() != checksum {
        return Err(ckpt_err(path, "checksum mismatch"));
    }
    let spec_len = r.u32()? as usize;
    let spec: ModelSpec =
        serde_json::from_slice(r.take(spec_len)?).map_err(|e| ckpt_err(path, e.to_string()))?;
    spec.validate()?;
    let count = r.u32()? as usize;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ckpt_err(path, "tensor name is not utf-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(8).ok_or_else(|| ckpt_err(path, "tensor too large"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(ckpt_err(path, "trailing bytes after tensors"));
    }
    params.check_against(&spec)?;
    Ok((spec, params))
}

/// Loads a checkpoint and insists on a particular architecture.
pub fn load_checkpoint_as(path: &Path, expected: Architecture) -> Result<(ModelSpec, ModelParams)> {
    let (spec, params) = load_checkpoint(path)?;
    if spec.architecture != expected {
        return Err(ModelError::SpecMismatch {
            expected,
            found: spec.architecture,
        });
    }
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let spec = ModelSpec::new(Architecture::Linear, [1, 2, 2], 2).unwrap();
        save_checkpoint(&spec, &init_params(&spec, 0), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 9;
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        fs::write(&path, b"DFPCKPT\0\x01\x00").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
