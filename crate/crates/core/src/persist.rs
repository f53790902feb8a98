//! Binary container shared by model checkpoints, training state and
//! Temp-LoRA snapshots.
//!
//! Layout: `SFVG` magic, u32 version, u64 header length, JSON header,
//! little-endian f32 payload in header order, then a CRC32 of every
//! preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use slowfast_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SFVG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub role: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(role: impl Into<String>) -> Self {
        Self {
            header: Header {
                role: role.into(),
                tensors: Vec::new(),
                meta: Default::default(),
            },
            tensors: Vec::new(),
        }
    }

    pub fn role(&self) -> &str {
        &self.header.role
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.header.tensors.push(TensorEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
        });
        self.tensors.push(t);
    }

    /// Adds every tensor of `store` under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for id in store.ids() {
            self.push(format!("{prefix}{}", store.name(id)), store.value(id).clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    /// Tensors under `prefix`, with the prefix stripped, in stored order.
    pub fn store(&self, prefix: &str) -> Result<ParamStore<f32>> {
        let mut s = ParamStore::new();
        for (e, t) in self.header.tensors.iter().zip(&self.tensors) {
            if let Some(name) = e.name.strip_prefix(prefix) {
                s.insert(name, t.clone())?;
            }
        }
        Ok(s)
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.header.meta.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .header
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn expect_role(&self, role: &str) -> Result<()> {
        if self.role() != role {
            return Err(Error::Checkpoint(format!(
                "expected a `{role}` checkpoint, found `{}`",
                self.role()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.tensors.iter().map(|t| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Verifies the CRC before interpreting anything else.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Checkpoint(format!("{} bytes is too short", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        if &body[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Checkpoint("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[16..hend])?;
        let mut pos = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("`{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let end = pos + n * 4;
            let raw = body
                .get(pos..end)
                .ok_or_else(|| Error::Checkpoint(format!("payload ends inside `{}`", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::new(&e.shape, data)?);
            pos = end;
        }
        if pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing payload bytes", body.len() - pos)));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
