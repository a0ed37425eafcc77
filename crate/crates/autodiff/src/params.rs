//! Named parameter containers, gradients and their on-disk form.
//!
//! The on-disk form is a JSON manifest (name, shape, dtype, byte offset plus
//! a free-form `config` object) next to a raw little-endian `f32` blob.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::{Scalar, Tensor};

/// Ordered set of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Panicking lookup for parameters a network created itself.
    pub fn expect(&self, name: &str) -> &Tensor<T> {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and the exact value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Overwrites every value with the one from `other`; names and shapes must match.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in &mut self.entries {
            let src = other
                .get(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if src.shape() != t.shape() {
                return Err(TensorError::Shape(format!(
                    "`{name}`: {:?} vs {:?}",
                    t.shape(),
                    src.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Parameter gradients keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn from_map(map: BTreeMap<String, Tensor<T>>) -> Self {
        Self { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Merges another gradient set, summing entries present in both.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (name, g) in other.map {
            match self.map.get_mut(&name) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a = *a + b),
                None => {
                    self.map.insert(name, g);
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    blob: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub const PARAM_FORMAT: &str = "orbvo-params";
pub const PARAM_FORMAT_VERSION: u32 = 1;

/// Path of the blob belonging to a manifest (`model.json` -> `model.bin`).
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `store` as a manifest plus `f32` blob. Output is byte-stable.
pub fn save_params<T: Scalar>(
    store: &ParamStore<T>,
    config: serde_json::Value,
    manifest_path: &Path,
) -> Result<()> {
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::with_capacity(store.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: bytes.len(),
        });
        for &v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: PARAM_FORMAT.into(),
        version: PARAM_FORMAT_VERSION,
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        config,
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| TensorError::Manifest(e.to_string()))?;
    fs::write(manifest_path, text + "\n")?;
    fs::write(blob, bytes)?;
    Ok(())
}

/// Reads a manifest and its blob, returning the parameters and the stored config.
pub fn load_params<T: Scalar>(manifest_path: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| TensorError::Manifest(e.to_string()))?;
    if manifest.format != PARAM_FORMAT || manifest.version != PARAM_FORMAT_VERSION {
        return Err(TensorError::Manifest(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let bytes = fs::read(blob)?;
    let mut store = ParamStore::new();
    for e in manifest.tensors {
        if e.dtype != "f32" {
            return Err(TensorError::Manifest(format!("`{}`: dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > bytes.len() {
            return Err(TensorError::Manifest(format!("`{}` runs past end of blob", e.name)));
        }
        let data = bytes[e.offset..end]
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.insert(e.name, Tensor::new(&e.shape, data)?)?;
    }
    Ok((store, manifest.config))
}
