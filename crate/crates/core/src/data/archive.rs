//! On-disk dataset archive.
//!
//! An archive is a directory holding `manifest.json` and `data.bin`. The
//! binary file stores `count` labels as little-endian `i32`, followed by
//! `count × channels × side × side` pixels as little-endian `f64`, each
//! example in channel-row-column order. The manifest repeats this layout in
//! prose and records the SHA-256 of `data.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, DomainSpec, LabeledDataset, Result, Split};
use crate::tensor::Tensor;

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const DATA: &str = "data.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    split: Split,
    count: usize,
    data_file: String,
    data_sha256: String,
    layout: String,
    spec: DomainSpec,
}

fn archive_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Archive {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn write_archive(ds: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let per_example: usize = ds.spec.input_shape().iter().product();
    let mut bytes = Vec::with_capacity(ds.len() * (4 + 8 * per_example));
    for &label in &ds.labels {
        let label = i32::try_from(label).map_err(|_| archive_err(dir, "label exceeds i32"))?;
        bytes.extend_from_slice(&label.to_le_bytes());
    }
    for x in &ds.inputs {
        for v in x.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: ARCHIVE_FORMAT_VERSION,
        split: ds.split,
        count: ds.len(),
        data_file: DATA.into(),
        data_sha256: hex_digest(&bytes),
        layout: format!(
            "{} x i32-le labels at offset 0, then {} x {} f64-le pixels (channel, row, column) at offset {}",
            ds.len(),
            ds.len(),
            per_example,
            4 * ds.len()
        ),
        spec: ds.spec.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| archive_err(dir, e.to_string()))?;
    text.push('\n');
    fs::write(dir.join(DATA), &bytes)?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

pub fn read_archive(dir: &Path) -> Result<LabeledDataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| archive_err(dir, e.to_string()))?;
    if manifest.format_version != ARCHIVE_FORMAT_VERSION {
        return Err(archive_err(
            dir,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    manifest.spec.validate()?;
    let bytes = fs::read(dir.join(&manifest.data_file))?;
    if hex_digest(&bytes) != manifest.data_sha256 {
        return Err(archive_err(dir, "data checksum mismatch"));
    }
    let shape = manifest.spec.input_shape();
    let per_example: usize = shape.iter().product();
    let n = manifest.count;
    if bytes.len() != n * (4 + 8 * per_example) {
        return Err(archive_err(dir, "data length does not match manifest"));
    }
    let (label_bytes, pixel_bytes) = bytes.split_at(4 * n);
    let labels = label_bytes
        .chunks_exact(4)
        .map(|c| {
            let v = i32::from_le_bytes(c.try_into().expect("chunk of 4"));
            usize::try_from(v).map_err(|_| archive_err(dir, format!("negative label {v}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs = pixel_bytes
        .chunks_exact(8 * per_example)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            Ok(Tensor::new(shape.to_vec(), data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(manifest.spec, manifest.split, inputs, labels)
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
