//! Versioned checkpoint files: a JSON manifest next to a raw blob of
//! little-endian `f64` values.
//!
//! `<stem>.json` holds the model kind, its configuration, auxiliary metadata
//! and the tensor index; `<stem>.bin` holds the values. Loading verifies the
//! blob length, the blob SHA-256 and the parameter hash before any tensor is
//! handed back.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PiernError, Result};
use crate::numerics::{hash_params, Parameter, Tensor};

pub const FORMAT_TAG: &str = "piern-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
    pub blob_file: String,
    pub blob_sha256: String,
    pub params_hash: String,
}

impl Manifest {
    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| PiernError::Checkpoint(format!("{} config: {e}", self.kind)))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| PiernError::Checkpoint(format!("{} manifest lacks `{key}`", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(PiernError::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Writes `<stem>.json` and `<stem>.bin` and returns the parameter hash.
pub fn save<C: Serialize>(
    stem: &Path,
    kind: &str,
    config: &C,
    meta: BTreeMap<String, String>,
    params: &[(String, &Parameter)],
) -> Result<String> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| PiernError::io(dir, e))?;
    }
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, p) in params {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.len();
        blob.extend(p.value.to_le_bytes());
    }
    let bin = blob_path(stem);
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        meta,
        tensors,
        blob_file: bin.file_name().unwrap().to_string_lossy().into_owned(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        params_hash: hash_params(params.iter().map(|(_, p)| *p)),
    };
    fs::write(&bin, &blob).map_err(|e| PiernError::io(&bin, e))?;
    let json = manifest_path(stem);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&json, text + "\n").map_err(|e| PiernError::io(&json, e))?;
    Ok(manifest.params_hash)
}

pub fn read_manifest(stem: &Path) -> Result<Manifest> {
    let json = manifest_path(stem);
    let text = fs::read_to_string(&json).map_err(|e| PiernError::io(&json, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(FORMAT_TAG) => {}
        Some(other) => return Err(PiernError::UnsupportedVersion(other.to_string())),
        None => return Err(PiernError::UnsupportedVersion("<missing>".into())),
    }
    Ok(serde_json::from_value(value)?)
}

/// Loads and verifies a checkpoint. Tensors come back frozen; callers that
/// keep training flip `trainable` themselves.
pub fn load(stem: &Path) -> Result<(Manifest, Vec<Parameter>)> {
    let manifest = read_manifest(stem)?;
    let bin = stem.with_file_name(&manifest.blob_file);
    let blob = fs::read(&bin).map_err(|e| PiernError::io(&bin, e))?;
    let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if blob.len() != expected * 8 {
        return Err(PiernError::Checkpoint(format!(
            "{}: blob holds {} bytes, manifest needs {}",
            bin.display(),
            blob.len(),
            expected * 8
        )));
    }
    let found = hex::encode(Sha256::digest(&blob));
    if found != manifest.blob_sha256 {
        return Err(PiernError::HashMismatch {
            what: bin.display().to_string(),
            expected: manifest.blob_sha256.clone(),
            found,
        });
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut params = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        let data = values
            .get(t.offset..t.offset + n)
            .ok_or_else(|| PiernError::Checkpoint(format!("tensor {} out of bounds", t.name)))?
            .to_vec();
        let mut p = Parameter::new(Tensor::new(t.shape.clone(), data)?);
        p.freeze();
        params.push(p);
    }
    let found = hash_params(&params);
    if found != manifest.params_hash {
        return Err(PiernError::HashMismatch {
            what: format!("{} parameters", manifest.kind),
            expected: manifest.params_hash.clone(),
            found,
        });
    }
    Ok((manifest, params))
}

/// Names `w0, b0, w1, ...` for interleaved weight/bias lists.
pub fn layer_names(params: &[Parameter]) -> Vec<String> {
    (0..params.len())
        .map(|i| format!("{}{}", if i % 2 == 0 { "w" } else { "b" }, i / 2))
        .collect()
}

pub fn named<'a>(names: &[String], params: &'a [Parameter]) -> Vec<(String, &'a Parameter)> {
    names.iter().cloned().zip(params.iter()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Parameter> {
        vec![
            Parameter::new(Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 1e-300, f64::MIN_POSITIVE, 7.0]).unwrap()),
            Parameter::new(Tensor::from_vec(vec![0.1, 0.2])),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let params = sample();
        let names = layer_names(&params);
        let hash = save(&stem, "test", &serde_json::json!({"a": 1}), BTreeMap::new(), &named(&names, &params)).unwrap();
        let (m, loaded) = load(&stem).unwrap();
        assert_eq!(m.kind, "test");
        assert_eq!(hash, hash_params(&loaded));
        for (a, b) in params.iter().zip(&loaded) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let params = sample();
        save(&stem, "test", &0, BTreeMap::new(), &named(&layer_names(&params), &params)).unwrap();
        let bin = blob_path(&stem);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&stem), Err(PiernError::Checkpoint(_))));
        let mut flipped = bytes.clone();
        flipped[0] ^= 1;
        fs::write(&bin, &flipped).unwrap();
        assert!(matches!(load(&stem), Err(PiernError::HashMismatch { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let params = sample();
        save(&stem, "test", &0, BTreeMap::new(), &named(&layer_names(&params), &params)).unwrap();
        let json = manifest_path(&stem);
        let text = fs::read_to_string(&json).unwrap().replace(FORMAT_TAG, "piern-ckpt-v9");
        fs::write(&json, text).unwrap();
        match load(&stem) {
            Err(PiernError::UnsupportedVersion(v)) => assert_eq!(v, "piern-ckpt-v9"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
