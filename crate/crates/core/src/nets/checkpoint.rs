//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "DKCK"
//! version      u32      1
//! spec hash    32 bytes SHA-256 of the spec JSON below
//! spec len     u32, then that many bytes of UTF-8 JSON (NetSpec)
//! channels     u32, then mean[channels] f64, then std[channels] f64
//! param count  u32, then per parameter:
//!   name len   u32, then UTF-8 name
//!   ndim       u32, then dims[ndim] u64
//!   values     prod(dims) f64
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{NetSpec, Param, ParamSet};
use crate::data::Normalization;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DKCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetSpec,
    pub params: ParamSet,
    pub normalization: Normalization,
}

fn spec_json(spec: &NetSpec) -> Result<String> {
    serde_json::to_string(spec).map_err(|e| Error::format(e.to_string()))
}

pub fn spec_hash(spec: &NetSpec) -> Result<[u8; 32]> {
    Ok(Sha256::digest(spec_json(spec)?.as_bytes()).into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format("length exceeds u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    ck.params.check_layout(&ck.spec)?;
    let json = spec_json(&ck.spec)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&spec_hash(&ck.spec)?);
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(json.as_bytes());
    let norm = &ck.normalization;
    put_u32(&mut out, norm.mean.len())?;
    for v in norm.mean.iter().chain(&norm.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_u32(&mut out, ck.params.len())?;
    for p in &ck.params.params {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.shape.len())?;
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(format!("checkpoint truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let b: [u8; 8] = self.take(8)?.try_into().expect("eight bytes");
        usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::format("dimension overflows usize"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::format("array too large"))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::format(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint: bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let json = r.string()?;
    if <[u8; 32]>::from(Sha256::digest(json.as_bytes())) != hash {
        return Err(Error::format("checkpoint spec hash mismatch"));
    }
    let spec: NetSpec = serde_json::from_str(&json).map_err(|e| Error::format(e.to_string()))?;
    let channels = r.u32()?;
    let mean = r.f64s(channels)?;
    let std = r.f64s(channels)?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let value = r.f64s(n.ok_or_else(|| Error::format("parameter too large"))?)?;
        params.push(Param { name, shape, value });
    }
    if r.at != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint"));
    }
    let params = ParamSet { params };
    params
        .check_layout(&spec)
        .map_err(|_| Error::format("checkpoint parameters do not match its spec"))?;
    Ok(Checkpoint {
        spec,
        params,
        normalization: Normalization { mean, std },
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
