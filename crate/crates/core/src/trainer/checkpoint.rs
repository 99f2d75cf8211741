//! Bit-exact binary checkpoint container.
//!
//! Layout, all integers little-endian u32:
//! `SCRAWLCK`, version, header length, UTF-8 `key=value` lines sorted by key,
//! record count, then per record: name length, UTF-8 name, rank, extents,
//! and IEEE-754 f32 values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"SCRAWLCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    /// Named tensors in file order.
    pub records: Vec<(String, Tensor<f32>)>,
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| fmt_err(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| fmt_err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| fmt_err("invalid UTF-8"))
    }
}

impl Checkpoint {
    pub fn header_text(&self) -> Result<String> {
        let mut text = String::new();
        for (k, v) in &self.header {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(fmt_err(format!("header entry `{k}` is not a single key=value line")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        Ok(text)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = self.header_text()?;
        put_u32(&mut out, header.len())?;
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.records.len())?;
        for (name, t) in &self.records {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &e in t.shape() {
                put_u32(&mut out, e)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let mut header = BTreeMap::new();
        for line in r.string()?.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| fmt_err(format!("header line `{line}`")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()?;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| fmt_err("extent overflow"))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| fmt_err("extent overflow"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| fmt_err(format!("record `{name}`: {e}")))?;
            records.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(fmt_err("trailing bytes"));
        }
        Ok(Self { header, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
