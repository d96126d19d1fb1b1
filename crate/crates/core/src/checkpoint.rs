//! Binary checkpoint of named arrays.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (dtype, step, architecture, free metadata, array names and
//! shapes), then every array's elements as little-endian floats in header
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"REGDACKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub architecture: serde_json::Value,
    pub metadata: serde_json::Value,
    pub arrays: Vec<(String, Tensor<T>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    step: u64,
    architecture: serde_json::Value,
    metadata: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

fn elem_bytes<T: Scalar>() -> usize {
    match T::DTYPE {
        "f32" => 4,
        _ => 8,
    }
}

fn push_elem<T: Scalar>(out: &mut Vec<u8>, v: T) {
    match T::DTYPE {
        "f32" => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
        _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
    }
}

fn read_elem<T: Scalar>(b: &[u8]) -> T {
    match T::DTYPE {
        "f32" => T::from_f64(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64),
        _ => T::from_f64(f64::from_le_bytes(b.try_into().expect("8 bytes"))),
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            dtype: T::DTYPE.into(),
            step: self.step,
            architecture: self.architecture.clone(),
            metadata: self.metadata.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(n, t)| ArrayEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.arrays.iter().map(|(_, t)| t.numel()).sum::<usize>() * elem_bytes::<T>();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for &v in t.data() {
                push_elem(&mut out, v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "stored as {}, requested {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let width = elem_bytes::<T>();
        let mut data = &body[hlen..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            if data.len() < n * width {
                return Err(Error::Checkpoint(format!("truncated data for {}", e.name)));
            }
            let values = data[..n * width].chunks_exact(width).map(read_elem).collect();
            data = &data[n * width..];
            arrays.push((e.name, Tensor::new(&e.shape, values)?));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after last array"));
        }
        Ok(Self {
            step: header.step,
            architecture: header.architecture,
            metadata: header.metadata,
            arrays,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}
