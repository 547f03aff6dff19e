//! Binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "DTCK"
//! version      u32      currently 1
//! dtype        u8       0 = f32, 1 = f64
//! kind         u32 length + UTF-8 bytes (model kind, e.g. "vit-cot")
//! config_hash  u64
//! seed         u64
//! count        u32      number of parameters
//! per parameter, in declaration order:
//!   name       u32 length + UTF-8 bytes
//!   ndim       u32
//!   dims       ndim × u64
//!   data       numel × IEEE-754 little-endian values of `dtype`
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{AutodiffError, Result};
use crate::float::Float;
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"DTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: String,
    pub config_hash: u64,
    pub seed: u64,
}

/// First eight bytes (little-endian) of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn encode<T: Float>(kind: &str, config_hash: u64, seed: u64, params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.num_scalars() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE);
    put_str(&mut out, kind);
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| AutodiffError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| AutodiffError::Checkpoint("invalid UTF-8 string".into()))
    }
}

pub fn decode<T: Float>(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let dtype = r.take(1)?[0];
    if dtype != T::DTYPE {
        return Err(AutodiffError::Checkpoint(format!(
            "dtype tag {dtype} does not match requested element type {}",
            T::DTYPE
        )));
    }
    let kind = r.string()?;
    let config_hash = r.u64()?;
    let seed = r.u64()?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let raw = r.take(numel(&shape) * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        params.push_raw(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(AutodiffError::Checkpoint("trailing bytes".into()));
    }
    Ok((
        CheckpointHeader {
            version,
            kind,
            config_hash,
            seed,
        },
        params,
    ))
}

pub fn save<T: Float>(
    path: &Path,
    kind: &str,
    config_hash: u64,
    seed: u64,
    params: &ParamStore<T>,
) -> Result<()> {
    std::fs::write(path, encode(kind, config_hash, seed, params))?;
    Ok(())
}

pub fn load<T: Float>(path: &Path) -> Result<(CheckpointHeader, ParamStore<T>)> {
    decode(&std::fs::read(path)?)
}
