//! Binary tensor records and the checkpoint container.
//!
//! A tensor record is `"VOST"`, `u32` version (= 1), `u32` rank, `u64` dims,
//! then little-endian `f32` values in row-major order. Values are narrowed
//! to `f32` on save and widened back on load.
//!
//! A checkpoint is a run of tensor records followed by a JSON index
//! `{"tensors": {name: byte offset}, "meta": ...}`, the index length as a
//! little-endian `u64`, and the trailer magic `"VCKP"`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"VOST";
pub const TENSOR_VERSION: u32 = 1;
const CHECKPOINT_TRAILER: &[u8; 4] = b"VCKP";

pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor) -> std::io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&TENSOR_VERSION.to_le_bytes())?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

fn bad(msg: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into())
}

pub fn read_tensor<R: Read>(input: &mut R) -> std::io::Result<Tensor> {
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    if &word != TENSOR_MAGIC {
        return Err(bad("missing VOST magic"));
    }
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != TENSOR_VERSION {
        return Err(bad(format!("unsupported tensor version {version}")));
    }
    input.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 8 {
        return Err(bad(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut long = [0u8; 8];
    for _ in 0..rank {
        input.read_exact(&mut long)?;
        shape.push(u64::from_le_bytes(long) as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n < (1 << 31))
        .ok_or_else(|| bad("tensor too large"))?;
    let mut raw = vec![0u8; numel * 4];
    input.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct Index {
    tensors: BTreeMap<String, u64>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Named tensors plus free-form JSON metadata, stored in one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        let mut offsets = BTreeMap::new();
        for (name, t) in &self.tensors {
            offsets.insert(name.clone(), buf.len() as u64);
            write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
        }
        let index = serde_json::to_vec(&Index {
            tensors: offsets,
            meta: self.meta.clone(),
        })
        .expect("index is serializable");
        buf.extend_from_slice(&index);
        buf.extend_from_slice(&(index.len() as u64).to_le_bytes());
        buf.extend_from_slice(CHECKPOINT_TRAILER);
        buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |msg: &str| Error::format(origin, msg);
        if bytes.len() < 12 || &bytes[bytes.len() - 4..] != CHECKPOINT_TRAILER {
            return Err(fail("missing checkpoint trailer"));
        }
        let len_at = bytes.len() - 12;
        let index_len = u64::from_le_bytes(bytes[len_at..len_at + 8].try_into().unwrap()) as usize;
        if index_len > len_at {
            return Err(fail("index length exceeds file size"));
        }
        let index_start = len_at - index_len;
        let index: Index = serde_json::from_slice(&bytes[index_start..len_at])
            .map_err(|e| Error::format(origin, format!("bad index: {e}")))?;
        let mut tensors = BTreeMap::new();
        for (name, off) in index.tensors {
            let off = off as usize;
            if off >= index_start {
                return Err(fail("tensor offset points into the index"));
            }
            let mut cursor = &bytes[off..index_start];
            let t = read_tensor(&mut cursor)
                .map_err(|e| Error::format(origin, format!("tensor {name}: {e}")))?;
            tensors.insert(name, t);
        }
        Ok(Checkpoint {
            tensors,
            meta: index.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
