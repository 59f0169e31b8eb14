//! Checkpoint format: a JSON manifest (`<stem>.json`) listing every tensor's
//! name, shape and byte offset into a raw little-endian `f32` blob
//! (`<stem>.bin`). Round-trips of `f32` data are bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length (4 × element count).
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub blob: String,
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<S: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<S>) {
        self.tensors.push((name.into(), t.cast()));
    }

    /// Add every parameter of `store` as `<prefix>.<param name>`.
    pub fn push_store<S: Scalar>(&mut self, prefix: &str, store: &ParamStore<S>) {
        for p in store.iter() {
            self.push(format!("{prefix}.{}", p.name), &p.value);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Load `<prefix>.<param name>` entries into a store with matching layout.
    pub fn load_store<S: Scalar>(&self, prefix: &str, store: &mut ParamStore<S>) -> Result<()> {
        for p in store.iter_mut() {
            let key = format!("{prefix}.{}", p.name);
            let t = self
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{key}: shape {:?} != {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }

    pub fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (json_path, bin_path) = Self::paths(dir, stem);
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = blob.len() as u64;
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: blob.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: "f32-le".into(),
            blob: format!("{stem}.bin"),
            tensors: entries,
            meta: self.meta.clone(),
        };
        fs::write(&bin_path, &blob).map_err(|e| Error::io(&bin_path, e))?;
        fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&json_path, e))?;
        Ok(manifest)
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let (json_path, _) = Self::paths(dir, stem);
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION || manifest.dtype != "f32-le" {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} / {}",
                manifest.format_version, manifest.dtype
            )));
        }
        let bin_path = dir.join(&manifest.blob);
        let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
            if e.nbytes as usize != 4 * n || end > blob.len() {
                return Err(Error::Checkpoint(format!("{}: bad extent", e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        }
        Ok(Checkpoint {
            tensors,
            meta: manifest.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<u32>(), 1..64),
            split in 1usize..8,
        ) {
            // Arbitrary bit patterns, NaN payloads included.
            let floats: Vec<f32> = values.iter().map(|&b| f32::from_bits(b)).collect();
            let n = floats.len();
            let rows = split.min(n);
            let used = (n / rows) * rows;
            let t = Tensor::new(&[rows, used / rows], floats[..used].to_vec()).unwrap();
            let mut ck = Checkpoint::new();
            ck.tensors.push(("a.w".into(), t.clone()));
            ck.tensors.push(("b".into(), Tensor::new(&[1], vec![floats[0]]).unwrap()));
            let dir = tempfile::tempdir().unwrap();
            ck.write(dir.path(), "ck").unwrap();
            let back = Checkpoint::read(dir.path(), "ck").unwrap();
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(back.get("a.w").unwrap()), bits(&t));
            prop_assert_eq!(back.get("a.w").unwrap().shape(), t.shape());
        }
    }

    #[test]
    fn manifest_offsets_are_contiguous() {
        let mut ck = Checkpoint::new();
        ck.push("x", &Tensor::<f32>::zeros(&[2, 3]));
        ck.push("y", &Tensor::<f32>::zeros(&[4]));
        let dir = tempfile::tempdir().unwrap();
        let m = ck.write(dir.path(), "m").unwrap();
        assert_eq!(m.tensors[0].offset, 0);
        assert_eq!(m.tensors[0].nbytes, 24);
        assert_eq!(m.tensors[1].offset, 24);
        let blob = std::fs::read(dir.path().join("m.bin")).unwrap();
        assert_eq!(blob.len(), 40);
    }
}
