//! Named-tensor archive.
//!
//! Layout:
//!
//! ```text
//! u64 LE  manifest length N
//! N bytes UTF-8 JSON manifest  { name: { "shape": [..], "dtype": "f32", "offset": o } }
//! zero padding up to the next 64-byte file offset
//! payload: raw little-endian f32 data, each tensor at payload-relative
//!          offset `o` (a multiple of 64)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: &Tensor) -> Result<()> {
        let shape = tensor.dims().to_vec();
        let data = tensor.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        self.tensors.insert(name.into(), (shape, data));
        Ok(())
    }

    pub fn insert_raw(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.insert(name.into(), (shape, data));
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut a = Self::new();
        for (name, var) in store.iter() {
            a.insert(name, var.as_tensor())?;
        }
        Ok(a)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(|(s, _)| s.as_slice())
    }

    pub fn get(&self, name: &str, device: &Device) -> Result<Option<Tensor>> {
        match self.tensors.get(name) {
            None => Ok(None),
            Some((shape, data)) => Ok(Some(Tensor::from_vec(data.clone(), shape.as_slice(), device)?)),
        }
    }

    pub fn raw(&self, name: &str) -> Option<&[f32]> {
        self.tensors.get(name).map(|(_, d)| d.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = BTreeMap::new();
        let mut offset = 0usize;
        for (name, (shape, data)) in &self.tensors {
            manifest.insert(name.clone(), ManifestEntry { shape: shape.clone(), dtype: "f32".into(), offset: offset as u64 });
            offset = align_up(offset + data.len() * 4);
        }
        let json = serde_json::to_vec(&manifest)?;
        let payload_start = align_up(8 + json.len());
        let mut out = Vec::with_capacity(payload_start + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(payload_start, 0);
        for (name, (_, data)) in &self.tensors {
            let start = payload_start + manifest[name].offset as usize;
            out.resize(start, 0);
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::archive("truncated header: fewer than 8 bytes"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(8..8usize.saturating_add(n))
            .ok_or_else(|| Error::archive(format!("truncated manifest: header declares {n} bytes")))?;
        let manifest: BTreeMap<String, ManifestEntry> =
            serde_json::from_slice(json).map_err(|e| Error::archive(format!("malformed manifest: {e}")))?;
        let payload = bytes.get(align_up(8 + n)..).unwrap_or(&[]);
        let mut problems = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, entry) in manifest {
            if entry.dtype != "f32" {
                problems.push(format!("{name}: unsupported dtype {:?}", entry.dtype));
                continue;
            }
            if entry.offset as usize % ALIGN != 0 {
                problems.push(format!("{name}: offset {} is not {ALIGN}-byte aligned", entry.offset));
                continue;
            }
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let Some(raw) = payload.get(start..start + count * 4) else {
                problems.push(format!("{name}: truncated payload (needs bytes {start}..{})", start + count * 4));
                continue;
            };
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.insert(name, (entry.shape, data));
        }
        if problems.is_empty() {
            Ok(Self { tensors })
        } else {
            Err(Error::Archive { problems })
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies every tensor into `store`, which must hold exactly the same
    /// names with the same shapes.
    pub fn load_into(&self, store: &ParamStore) -> Result<()> {
        let mut problems = Vec::new();
        for name in store.names() {
            if !self.tensors.contains_key(name) {
                problems.push(format!("missing tensor {name}"));
            }
        }
        for (name, (shape, _)) in &self.tensors {
            match store.get(name) {
                None => problems.push(format!("unknown tensor {name}")),
                Some(v) if v.dims() != shape.as_slice() => {
                    problems.push(format!("shape mismatch for {name}: archive {shape:?}, model {:?}", v.dims()))
                }
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::Archive { problems });
        }
        for (name, (shape, data)) in &self.tensors {
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), store.device())?;
            store.assign(name, &t)?;
        }
        Ok(())
    }
}
