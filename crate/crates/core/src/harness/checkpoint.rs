//! Named-tensor checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "COSCKPT1"
//! version    u32      1
//! count      u32      number of tensors
//! table      count × { name_len u32, name utf-8, dtype u8, rank u32,
//!                      dims rank × u32, offset u64 }
//! payload    f32 little-endian values; offsets are byte offsets from the
//!            start of the payload
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::assembly::{CosConfig, CosParams};
use crate::error::{CosError, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"COSCKPT1";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

fn bad(msg: impl Into<String>) -> CosError {
    CosError::Checkpoint(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Values are rounded to `f32` on construction, so a checkpoint compares
    /// equal to what it reads back.
    pub fn new(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in &tensors {
            if !seen.insert(name.as_str()) {
                return Err(bad(format!("duplicate tensor name {name:?}")));
            }
        }
        let tensors = tensors
            .into_iter()
            .map(|(n, t)| (n, t.map(|v| v as f32 as f64)))
            .collect();
        Ok(Self { tensors })
    }

    pub fn from_params(params: &CosParams) -> Self {
        Self::new(params.named().into_iter().map(|(n, t)| (n, t.clone())).collect())
            .expect("parameter names are unique")
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fills a parameter set shaped by `cfg`; every tensor must be present
    /// with the right shape and no extras are allowed.
    pub fn to_params(&self, cfg: &CosConfig) -> Result<CosParams> {
        let mut params = CosParams::zeros(cfg)?;
        let by_name: BTreeMap<&str, &Tensor> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut used = 0;
        for (name, slot) in params.named_mut() {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(bad(format!(
                    "{name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = (*t).clone();
            used += 1;
        }
        if used != self.tensors.len() {
            return Err(bad(format!(
                "{} tensors in checkpoint, config uses {used}",
                self.tensors.len()
            )));
        }
        Ok(params)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F32])?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&offset.to_le_bytes())?;
            offset += 4 * t.numel() as u64;
        }
        for (_, t) in &self.tensors {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| bad("tensor name is not utf-8"))?
                .to_string();
            let dtype = cur.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(bad(format!("{name}: unsupported dtype code {dtype}")));
            }
            let rank = cur.u32()? as usize;
            let dims = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = cur.u64()?;
            table.push((name, dims, offset));
        }
        let payload = &bytes[cur.pos..];

        let mut spans = Vec::with_capacity(table.len());
        let mut tensors = Vec::with_capacity(table.len());
        for (name, dims, offset) in table {
            let numel: usize = dims.iter().product();
            let start = usize::try_from(offset).map_err(|_| bad("offset overflow"))?;
            let end = start
                .checked_add(4 * numel)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| bad(format!("{name}: data out of bounds")))?;
            spans.push((start, end, name.clone()));
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| bad(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(bad(format!("{} overlaps {}", w[1].2, w[0].2)));
            }
        }
        Self::new(tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
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
            .ok_or_else(|| bad("truncated header"))?;
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
