//! Little-endian tensor container and named parameter sets.
//!
//! One tensor record is
//!
//! ```text
//! b"SWMT" | version: u32 | rank: u32 | extents: u64 x rank | payload: f64 x count
//! ```
//!
//! A parameter set is a run of records in one binary file plus a JSON
//! manifest naming each record and giving its byte offset.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SWMT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f64).to_le_bytes());
    }
}

/// Decode one record from the front of `bytes`; returns it and the number
/// of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected SWMT".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rank = cur.u32()? as usize;
    if rank == 0 {
        return Err(Error::Format("rank 0 record".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u64()? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("extent product overflows".into()))?;
    let payload = cur.take(count.checked_mul(8).ok_or_else(|| Error::Format("payload too large".into()))?)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")) as Real)
        .collect();
    Ok((Tensor::new(shape, data)?, cur.pos))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated record".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after record",
            bytes.len() - used
        )));
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// JSON sidecar describing a parameter-set container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    /// Free-form metadata (config echo, group hashes, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Encode named tensors into container bytes and their manifest.
pub fn encode_param_set(
    tensors: &[(String, Tensor)],
    meta: serde_json::Value,
) -> (Vec<u8>, Manifest) {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        encode_tensor(t, &mut bytes);
    }
    let manifest = Manifest {
        format: "SWMT".into(),
        version: FORMAT_VERSION,
        entries,
        meta,
    };
    (bytes, manifest)
}

pub fn decode_param_set(bytes: &[u8], manifest: &Manifest) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let start = e.offset as usize;
        if start > bytes.len() {
            return Err(Error::Format(format!("offset of `{}` beyond end", e.name)));
        }
        let (t, _) = decode_tensor(&bytes[start..])?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!(
                "`{}` has shape {:?}, manifest says {:?}",
                e.name,
                t.shape(),
                e.shape
            )));
        }
        out.push((e.name.clone(), t));
    }
    Ok(out)
}

pub fn save_param_set(
    bin_path: &Path,
    json_path: &Path,
    tensors: &[(String, Tensor)],
    meta: serde_json::Value,
) -> Result<()> {
    let (bytes, manifest) = encode_param_set(tensors, meta);
    fs::write(bin_path, bytes)?;
    fs::write(json_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_param_set(
    bin_path: &Path,
    json_path: &Path,
) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(json_path)?)?;
    let bytes = fs::read(bin_path)?;
    let tensors = decode_param_set(&bytes, &manifest)?;
    Ok((tensors, manifest.meta))
}
