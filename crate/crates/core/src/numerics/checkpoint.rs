//! Flat binary parameter container plus JSON manifest.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TPCK" | version: u32
//! repeated per tensor:
//!   name_len: u32 | name: utf-8 bytes | rank: u32 | dims: u32 × rank | values
//! ```
//!
//! Values are raw little-endian floats whose width is given by the
//! manifest's `dtype` (`f32` or `f64`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{NumericsError, ParamStore, Tensor};
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"TPCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + store.num_scalars() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumericsError> {
        if self.pos + n > self.bytes.len() {
            return Err(NumericsError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NumericsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>, NumericsError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NumericsError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NumericsError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| NumericsError::Checkpoint(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `path` and its manifest next to it; returns the manifest.
pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path, meta: serde_json::Value) -> Result<Manifest, NumericsError> {
    let bytes = encode(store);
    let manifest = Manifest {
        format: "TPCK".into(),
        version: VERSION,
        dtype: T::DTYPE.into(),
        sha256: sha256_hex(&bytes),
        tensors: store.iter().map(|(_, n, t)| TensorEntry { name: n.into(), shape: t.shape().to_vec() }).collect(),
        meta,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, &bytes)?;
    fs::write(manifest_path(path), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads a checkpoint; the manifest, when present, must agree on dtype and hash.
pub fn load<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, Option<Manifest>), NumericsError> {
    let bytes = fs::read(path)?;
    let mpath = manifest_path(path);
    let manifest = if mpath.exists() {
        let m: Manifest = serde_json::from_slice(&fs::read(&mpath)?)?;
        if m.dtype != T::DTYPE {
            return Err(NumericsError::Checkpoint(format!("dtype {} but loading as {}", m.dtype, T::DTYPE)));
        }
        if m.sha256 != sha256_hex(&bytes) {
            return Err(NumericsError::Checkpoint("manifest hash does not match payload".into()));
        }
        Some(m)
    } else {
        None
    };
    Ok((decode(&bytes)?, manifest))
}
