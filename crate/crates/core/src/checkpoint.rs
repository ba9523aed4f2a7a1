//! Single-file weight containers.
//!
//! Layout: the 8-byte magic `HVDCKPT1`, a little-endian `u64` manifest
//! length, the manifest as UTF-8 JSON, then every tensor's values as
//! little-endian `f64` in manifest order. The manifest carries the model kind,
//! free-form architecture metadata, tensor names/shapes and a digest of the
//! weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HVDCKPT1";

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub digest: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, meta: serde_json::Value, store: &ParamStore) -> Self {
        let tensors: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Self {
            manifest: CheckpointManifest {
                kind: kind.to_string(),
                meta,
                tensors: tensors
                    .iter()
                    .map(|(n, t)| TensorEntry {
                        name: n.clone(),
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
                digest: store.digest(),
            },
            tensors,
        }
    }

    pub fn digest(&self) -> &str {
        &self.manifest.digest
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.manifest.meta.clone())
            .map_err(|e| Error::Config(format!("{} checkpoint metadata: {e}", self.manifest.kind)))
    }

    /// Restores the weights into `store`, which must have the same layout.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        store.load(self.tensors.clone())?;
        if store.digest() != self.manifest.digest {
            return Err(Error::Config(format!("{} checkpoint digest mismatch after load", self.manifest.kind)));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let manifest = serde_json::to_vec_pretty(&self.manifest).expect("manifest serialises");
        let n: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut buf = Vec::with_capacity(16 + manifest.len() + 8 * n);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        buf.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::format(path, "truncated manifest"))?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(body).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
        let mut off = 16 + len;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(off..off + 8 * n)
                .ok_or_else(|| Error::format(path, format!("truncated tensor {}", e.name)))?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            off += 8 * n;
        }
        if off != bytes.len() {
            return Err(Error::format(path, "trailing bytes after tensor data"));
        }
        Ok(Self { manifest, tensors })
    }
}
