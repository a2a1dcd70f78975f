//! Manifest + raw little-endian `f32` blob storage.
//!
//! A store is a directory holding `manifest.txt` (flat `key: value` lines)
//! and `tensors.bin` (every tensor's payload concatenated in manifest order).
//! Used for PCA models and denoiser checkpoints.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const BLOBS: &str = "tensors.bin";
const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

/// Ordered metadata plus tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<Tensor>,
}

impl TensorStore {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Missing(format!("manifest key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("manifest key `{key}` has bad value `{raw}`")))
    }

    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Missing(format!("tensor `{name}`")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        manifest.push_str(&format!("format: {}\n", self.kind));
        manifest.push_str(&format!("version: {FORMAT_VERSION}\n"));
        manifest.push_str("dtype: f32\n");
        manifest.push_str("endianness: little\n");
        for (k, v) in &self.meta {
            manifest.push_str(&format!("{k}: {v}\n"));
        }
        let mut blob = Vec::new();
        for (i, t) in self.tensors.iter().enumerate() {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor.{i}: {} {}\n", t.name, dims.join("x")));
            blob.reserve(t.data.len() * 4);
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOBS);
        fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path, expected_kind: &str) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut store = TensorStore::default();
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| {
                Error::format(&mpath, format!("line {}: expected `key: value`", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "format" => store.kind = v.to_string(),
                "version" if v != FORMAT_VERSION => {
                    return Err(Error::format(&mpath, format!("unsupported version {v}")))
                }
                "dtype" if v != "f32" => {
                    return Err(Error::format(&mpath, format!("unsupported dtype {v}")))
                }
                "endianness" if v != "little" => {
                    return Err(Error::format(&mpath, format!("unsupported endianness {v}")))
                }
                "version" | "dtype" | "endianness" => {}
                _ if k.starts_with("tensor.") => {
                    let (name, dims) = v
                        .split_once(' ')
                        .ok_or_else(|| Error::format(&mpath, format!("bad tensor line `{v}`")))?;
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::format(&mpath, format!("bad shape `{dims}`")))?;
                    specs.push((name.to_string(), shape));
                }
                _ => store.meta.push((k.to_string(), v.to_string())),
            }
        }
        if store.kind != expected_kind {
            return Err(Error::format(
                &mpath,
                format!("expected format `{expected_kind}`, found `{}`", store.kind),
            ));
        }
        let bpath = dir.join(BLOBS);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let total: usize = specs.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if blob.len() != total * 4 {
            return Err(Error::format(
                &bpath,
                format!("expected {} bytes, found {}", total * 4, blob.len()),
            ));
        }
        let mut floats = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for (name, shape) in specs {
            let n = shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            store.tensors.push(Tensor { name, shape, data });
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TensorStore::new("test-store");
        s.set("d", 3);
        s.set("note", "hello world");
        s.push(Tensor::new("a", vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-12]));
        s.push(Tensor::new("b", vec![3], vec![0.1, 0.2, 0.3]));
        s.save(dir.path()).unwrap();
        let back = TensorStore::load(dir.path(), "test-store").unwrap();
        assert_eq!(back.meta, s.meta);
        for (x, y) in back.tensors.iter().zip(&s.tensors) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.shape, y.shape);
            let xb: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        let bytes = std::fs::read(dir.path().join(BLOBS)).unwrap();
        assert_eq!(bytes.len(), 7 * 4);
        assert_eq!(&bytes[..4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn wrong_kind_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TensorStore::new("kind-a");
        s.push(Tensor::new("a", vec![2], vec![1.0, 2.0]));
        s.save(dir.path()).unwrap();
        assert!(TensorStore::load(dir.path(), "kind-b").is_err());
        std::fs::write(dir.path().join(BLOBS), [0u8; 5]).unwrap();
        assert!(TensorStore::load(dir.path(), "kind-a").is_err());
    }
}
