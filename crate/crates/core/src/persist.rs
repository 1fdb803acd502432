//! `manifest.json` + `weights.bin` tensor directories.
//!
//! `weights.bin` is the concatenation of every tensor as little-endian `f32`,
//! in manifest order. The manifest records each tensor's name, shape and byte
//! offset, the SHA-256 of `weights.bin`, and a kind-specific metadata block.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::hex_digest;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const FORMAT: &str = "styler-tensors";
pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorManifest<M> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub metadata: M,
    pub weights_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save<M: Serialize>(
    dir: &Path,
    kind: &str,
    metadata: M,
    tensors: &[(String, &Array2<f32>)],
) -> Result<TensorManifest<M>> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: vec![t.nrows(), t.ncols()],
            offset: bytes.len() as u64,
            dtype: DTYPE.to_string(),
        });
        for v in t.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = TensorManifest {
        format: FORMAT.to_string(),
        version: 1,
        kind: kind.to_string(),
        metadata,
        weights_sha256: hex_digest(&bytes),
        tensors: entries,
    };
    fs::write(dir.join(WEIGHTS_FILE), &bytes)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

pub fn load<M: DeserializeOwned>(
    dir: &Path,
    kind: &str,
) -> Result<(TensorManifest<M>, Vec<(String, Array2<f32>)>)> {
    let corrupt = |reason: String| Error::CorruptFile {
        path: dir.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: TensorManifest<M> =
        serde_json::from_str(&text).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(corrupt(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.kind != kind {
        return Err(corrupt(format!("expected kind `{kind}`, found `{}`", manifest.kind)));
    }
    let bytes = fs::read(dir.join(WEIGHTS_FILE))?;
    if hex_digest(&bytes) != manifest.weights_sha256 {
        return Err(corrupt("weights.bin hash does not match manifest".into()));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0u64;
    for entry in &manifest.tensors {
        if entry.dtype != DTYPE || entry.shape.len() != 2 || entry.offset != expected_offset {
            return Err(corrupt(format!("bad tensor entry `{}`", entry.name)));
        }
        let n = entry.shape[0] * entry.shape[1];
        let start = entry.offset as usize;
        let end = start + 4 * n;
        if end > bytes.len() {
            return Err(corrupt(format!("tensor `{}` runs past end of file", entry.name)));
        }
        let values: Vec<f32> = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), values)
            .map_err(|e| corrupt(e.to_string()))?;
        tensors.push((entry.name.clone(), arr));
        expected_offset = end as u64;
    }
    if expected_offset as usize != bytes.len() {
        return Err(corrupt("trailing bytes in weights.bin".into()));
    }
    Ok((manifest, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Meta {
        seed: u64,
    }

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let a = array![[1.0f32, -2.5], [3.0, 0.125]];
        let b = array![[7.0f32]];
        save(dir.path(), "test", Meta { seed: 3 }, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let (m, t) = load::<Meta>(dir.path(), "test").unwrap();
        assert_eq!(m.metadata, Meta { seed: 3 });
        assert_eq!(t[0].1, a);
        assert_eq!(t[1].1, b);
        assert!(load::<Meta>(dir.path(), "other").is_err());

        let mut bytes = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        bytes[0] ^= 1;
        fs::write(dir.path().join(WEIGHTS_FILE), bytes).unwrap();
        assert!(matches!(
            load::<Meta>(dir.path(), "test"),
            Err(Error::CorruptFile { .. })
        ));
    }
}
