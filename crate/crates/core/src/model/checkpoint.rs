//! Binary checkpoint: magic, format version, a length-prefixed JSON manifest
//! (metadata plus tensor names and shapes), then every tensor's data as
//! little-endian `f64` in manifest order.

use std::fs;
use std::path::Path;

use autodiff::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCNPOSE\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Json {
            context: "checkpoint manifest".into(),
            source: e,
        })?;
        let scalars: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + scalars * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..len]).map_err(|e| Error::Json {
            context: "checkpoint manifest".into(),
            source: e,
        })?;
        let mut data = body[len..].chunks_exact(8);
        let expected: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if body.len() - len != expected * 8 {
            return Err(bad(format!(
                "data section holds {} bytes, manifest needs {}",
                body.len() - len,
                expected * 8
            )));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let vals: Vec<f64> = (&mut data)
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, vals)?));
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

/// Named copies of every tensor in `store`, names prefixed.
pub fn store_tensors(prefix: &str, store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .names()
        .iter()
        .zip(store.tensors())
        .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
        .collect()
}

/// Overwrites every tensor of `store` from the checkpoint, checking that each
/// one exists with the expected shape.
pub fn load_store(ckpt: &Checkpoint, prefix: &str, store: &mut ParamStore) -> Result<()> {
    let names = store.names().to_vec();
    for (slot, n) in names.iter().enumerate() {
        let key = format!("{prefix}{n}");
        let t = ckpt.get(&key).ok_or_else(|| bad(format!("missing tensor `{key}`")))?;
        if t.shape() != store.get(slot).shape() {
            return Err(bad(format!(
                "tensor `{key}` has shape {:?}, model expects {:?}",
                t.shape(),
                store.get(slot).shape()
            )));
        }
        if !t.is_finite() {
            return Err(bad(format!("tensor `{key}` holds non-finite values")));
        }
        *store.get_mut(slot) = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::Skeleton;
    use crate::model::{Denoiser, ModelConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let d = Denoiser::new(&ModelConfig::desk(), &Skeleton::default(), 100, 5);
        let mut tensors = store_tensors("", &d.params);
        tensors.push(("odd".into(), Tensor::new(vec![3], vec![f64::MIN_POSITIVE, -0.0, 1e300]).unwrap()));
        let ckpt = Checkpoint {
            meta: serde_json::json!({"epoch": 3, "note": "x"}),
            tensors,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.tensors.len(), ckpt.tensors.len());
        for ((na, a), (nb, b)) in back.tensors.iter().zip(&ckpt.tensors) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let mut fresh = Denoiser::new(&ModelConfig::desk(), &Skeleton::default(), 100, 6);
        load_store(&back, "", &mut fresh.params).unwrap();
        assert_eq!(fresh.params, d.params);
    }

    #[test]
    fn loading_validates_shapes_and_bytes() {
        let d = Denoiser::new(&ModelConfig::desk(), &Skeleton::default(), 100, 5);
        let ckpt = Checkpoint {
            meta: serde_json::Value::Null,
            tensors: store_tensors("", &d.params),
        };
        let bytes = ckpt.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage garbage garbage").is_err());
        let wider = ModelConfig {
            hidden: 65,
            ..ModelConfig::desk()
        };
        let mut other = Denoiser::new(&wider, &Skeleton::default(), 100, 5);
        let err = load_store(&ckpt, "", &mut other.params).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
