//! Directory container used for clips, features and checkpoints.
//!
//! A container is a directory holding `manifest.json` plus one raw
//! little-endian `f32` file per named 2-D array. The manifest records every
//! array's shape, dtype tag and SHA-256 digest together with a free-form
//! `meta` object owned by the caller.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::hex;
use crate::tensor::Matrix;

pub const MANIFEST: &str = "manifest.json";
pub const DTYPE: &str = "f32-le";
pub const ENDIANNESS: &str = "little";
pub const FORMAT: &str = "cdface-container";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub endianness: String,
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

/// Row-major `f32` array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayF32 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl ArrayF32 {
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&x| f64::from(x)).collect())
            .expect("shape checked on load")
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

/// Rounds every entry to the nearest `f32`, so values survive a save/load
/// round trip unchanged.
pub fn round_to_f32(m: &Matrix) -> Matrix {
    m.map(|x| f64::from(x as f32))
}

fn digest(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.bin")
}

#[derive(Debug, Clone)]
pub struct ContainerWriter {
    kind: String,
    meta: serde_json::Value,
    arrays: BTreeMap<String, ArrayF32>,
}

impl ContainerWriter {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: serde_json::Value::Null,
            arrays: BTreeMap::new(),
        }
    }

    pub fn meta<T: Serialize>(mut self, meta: &T) -> Result<Self> {
        self.meta = serde_json::to_value(meta).map_err(|e| Error::invalid(format!("meta: {e}")))?;
        Ok(self)
    }

    pub fn array(mut self, name: impl Into<String>, array: ArrayF32) -> Self {
        self.arrays.insert(name.into(), array);
        self
    }

    pub fn matrix(self, name: impl Into<String>, m: &Matrix) -> Self {
        self.array(name, ArrayF32::from_matrix(m))
    }

    /// Writes arrays first and the manifest last.
    pub fn write(self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = BTreeMap::new();
        for (name, array) in &self.arrays {
            let file = file_name(name);
            let bytes = array.to_bytes();
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            entries.insert(
                name.clone(),
                ArrayEntry {
                    file,
                    shape: [array.rows, array.cols],
                    dtype: DTYPE.to_string(),
                    sha256: digest(&bytes),
                },
            );
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            version: VERSION,
            kind: self.kind,
            endianness: ENDIANNESS.to_string(),
            meta: self.meta,
            arrays: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = dir.join(MANIFEST);
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone)]
pub struct Container {
    pub dir: PathBuf,
    pub manifest: Manifest,
    arrays: BTreeMap<String, ArrayF32>,
}

impl Container {
    /// Loads and verifies every array (length, dtype, endianness, checksum).
    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(Error::format(&mpath, format!("unknown format {:?}", manifest.format)));
        }
        if manifest.endianness != ENDIANNESS {
            return Err(Error::format(
                &mpath,
                format!("endianness {:?}, expected {ENDIANNESS:?}", manifest.endianness),
            ));
        }
        let mut arrays = BTreeMap::new();
        for (name, entry) in &manifest.arrays {
            let path = dir.join(&entry.file);
            if entry.dtype != DTYPE {
                return Err(Error::format(&path, format!("dtype {:?}, expected {DTYPE:?}", entry.dtype)));
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let [rows, cols] = entry.shape;
            if bytes.len() != rows * cols * 4 {
                return Err(Error::format(
                    &path,
                    format!("{} bytes for shape {rows}×{cols}", bytes.len()),
                ));
            }
            let sum = digest(&bytes);
            if sum != entry.sha256 {
                return Err(Error::format(&path, format!("checksum {sum} does not match manifest")));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.insert(name.clone(), ArrayF32 { rows, cols, data });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            arrays,
        })
    }

    pub fn kind(&self) -> &str {
        &self.manifest.kind
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(Error::format(
                &self.dir,
                format!("container holds {:?}, expected {kind:?}", self.manifest.kind),
            ));
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn array(&self, name: &str) -> Result<&ArrayF32> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::format(&self.dir, format!("missing array {name:?}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        Ok(self.array(name)?.to_matrix())
    }

    pub fn meta<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.manifest.meta.clone())
            .map_err(|e| Error::format(self.dir.join(MANIFEST), format!("meta: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Matrix {
        Matrix::from_vec(2, 3, vec![0.5, -1.25, 3.0, 1e-3, 7.0, -0.0]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = round_to_f32(&sample());
        ContainerWriter::new("test")
            .meta(&serde_json::json!({"fps": 25.0}))
            .unwrap()
            .matrix("a/b", &m)
            .write(dir.path())
            .unwrap();
        let c = Container::read(dir.path()).unwrap();
        assert_eq!(c.kind(), "test");
        assert_eq!(c.matrix("a/b").unwrap(), m);
        let meta: serde_json::Value = c.meta().unwrap();
        assert_eq!(meta["fps"], 25.0);
        assert!(c.matrix("missing").is_err());
        assert!(c.expect_kind("other").is_err());
    }

    #[test]
    fn manifest_checksum_matches_recomputed_digest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = ContainerWriter::new("test").matrix("x", &sample()).write(dir.path()).unwrap();
        let bytes = fs::read(dir.path().join(&manifest.arrays["x"].file)).unwrap();
        let mut h = Sha256::new();
        h.update(&bytes);
        let expect: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(manifest.arrays["x"].sha256, expect);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = ContainerWriter::new("test").matrix("x", &sample()).write(dir.path()).unwrap();
        let file = dir.path().join(&manifest.arrays["x"].file);
        let mut bytes = fs::read(&file).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&file, &bytes).unwrap();
        assert!(matches!(Container::read(dir.path()), Err(Error::Format { .. })));

        bytes.extend_from_slice(&[0, 0, 0, 1]);
        fs::write(&file, &bytes).unwrap();
        let err = Container::read(dir.path()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn endianness_tag_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        ContainerWriter::new("test").matrix("x", &sample()).write(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("\"little\"", "\"big\"");
        fs::write(&path, text).unwrap();
        let err = Container::read(dir.path()).unwrap_err();
        assert!(err.to_string().contains("endianness"));
        assert_eq!(err.exit_code(), 2);
    }
}
