//! Binary checkpoint: `IDLB`, version, JSON meta, record table, fp32
//! payloads, trailing crc32. Raw and EMA weights live under `raw/` and
//! `ema/`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ModelWeights;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IDLB";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Free-form metadata (model config, step, ...).
    pub meta: serde_json::Value,
    pub raw: ModelWeights<T>,
    pub ema: Option<ModelWeights<T>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(String, &Tensor<T>)> = self.raw.iter().map(|(k, v)| (format!("raw/{k}"), v)).collect();
        if let Some(ema) = &self.ema {
            entries.extend(ema.iter().map(|(k, v)| (format!("ema/{k}"), v)));
        }
        let meta = serde_json::to_vec(&self.meta).map_err(|e| bad(e.to_string()))?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.numel() as u64;
        }
        for (_, t) in &entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 12 {
            return Err(bad("file too short"));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mlen = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(mlen)?).map_err(|e| bad(e.to_string()))?;
        let n = r.u32()? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("non-utf8 name"))?.to_string();
            if r.u8()? != DTYPE_F32 {
                return Err(bad(format!("{name}: unsupported dtype")));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let off = r.u64()? as usize;
            records.push((name, shape, off));
        }
        let payload = &body[r.pos..];
        let mut raw = ModelWeights::new();
        let mut ema = ModelWeights::new();
        for (name, shape, off) in records {
            let numel: usize = shape.iter().product();
            let bytes = off
                .checked_add(4 * numel)
                .filter(|&e| e <= payload.len())
                .map(|e| &payload[off..e])
                .ok_or_else(|| bad(format!("{name}: payload out of range")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            let t = Tensor::new(&shape, data)?;
            if let Some(k) = name.strip_prefix("raw/") {
                raw.insert(k, t)?;
            } else if let Some(k) = name.strip_prefix("ema/") {
                ema.insert(k, t)?;
            } else {
                return Err(bad(format!("record {name} outside raw/ and ema/")));
            }
        }
        Ok(Self {
            meta,
            raw,
            ema: (!ema.is_empty()).then_some(ema),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// EMA weights when present, raw otherwise.
    pub fn inference_weights(&self) -> &ModelWeights<T> {
        self.ema.as_ref().unwrap_or(&self.raw)
    }
}
