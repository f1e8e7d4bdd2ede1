//! Binary tensor (`.nt`) and named-weight (`NWTS`) files.
//!
//! `.nt`: `NTSR`, u8 version 1, u8 rank, rank × u32 extents, then f64 values.
//! `NWTS`: `NWTS`, u8 version 1, u32 tensor count, then per tensor a u16 name
//! length, the UTF-8 name, u8 rank, rank × u32 extents and f64 values. All
//! integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use mcinet_core::graph::ModelGraph;
use mcinet_core::Tensor;

use crate::error::{self, AppError, Result};

pub const NT_MAGIC: &[u8; 4] = b"NTSR";
pub const NWTS_MAGIC: &[u8; 4] = b"NWTS";
pub const VERSION: u8 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {} (needed {n} more)", self.at))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> std::result::Result<(), String> {
        let found = self.take(4)?;
        if found != magic {
            return Err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(magic)
            ));
        }
        match self.u8()? {
            VERSION => Ok(()),
            v => Err(format!("unsupported version {v}")),
        }
    }

    fn tensor(&mut self) -> std::result::Result<Tensor, String> {
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("extent product overflows")?;
        let raw = self.take(count.checked_mul(8).ok_or("payload size overflows")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }

    fn finish(&self) -> std::result::Result<(), String> {
        match self.bytes.len() - self.at {
            0 => Ok(()),
            extra => Err(format!("{extra} trailing bytes")),
        }
    }
}

fn put_tensor(out: &mut Vec<u8>, shape: &[usize], data: &[f64]) {
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_nt(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(NT_MAGIC);
    out.push(VERSION);
    put_tensor(&mut out, t.shape(), t.data());
    out
}

pub fn decode_nt(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut r = Reader { bytes, at: 0 };
    r.header(NT_MAGIC)?;
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

pub fn read_nt(path: &Path) -> Result<Tensor> {
    decode_nt(&error::read(path)?).map_err(|e| AppError::format(path, e))
}

pub fn write_nt(path: &Path, t: &Tensor) -> Result<()> {
    error::write(path, &encode_nt(t))
}

/// Every named tensor of `g`, in node order.
pub fn encode_weights(g: &ModelGraph) -> Vec<u8> {
    let tensors = g.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(NWTS_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_tensor(&mut out, &shape, data);
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> std::result::Result<BTreeMap<String, Tensor>, String> {
    let mut r = Reader { bytes, at: 0 };
    r.header(NWTS_MAGIC)?;
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| "tensor name is not UTF-8")?
            .to_string();
        let t = r.tensor()?;
        if out.insert(name.clone(), t).is_some() {
            return Err(format!("duplicate tensor `{name}`"));
        }
    }
    r.finish()?;
    Ok(out)
}

pub fn save_weights(g: &ModelGraph, path: &Path) -> Result<()> {
    error::write(path, &encode_weights(g))
}

pub fn read_weights(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    decode_weights(&error::read(path)?).map_err(|e| AppError::format(path, e))
}

/// Loads by node id and shape; on any mismatch the graph is left unchanged.
pub fn load_weights(g: &mut ModelGraph, path: &Path) -> Result<()> {
    let tensors = read_weights(path)?;
    g.load_tensors(&tensors)
        .map_err(|e| AppError::format(path, e.to_string()))
}
