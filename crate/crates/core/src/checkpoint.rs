//! Binary parameter container.
//!
//! Layout, little-endian: magic `VIPCKPT\0`, `u32` version, `u32` length
//! and UTF-8 metadata text (`key=value` lines), `u32` tensor count, then
//! per tensor a `u32` name length, the name, `u32` rank, `u64` dims and
//! `f64` values.

use std::fs;
use std::path::Path;

use vip_tensor::Tensor;

use crate::error::{Error, Result};
use crate::model::ParamSet;

const MAGIC: &[u8; 8] = b"VIPCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_bytes(&mut out, meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::parse(path, 0, format!("corrupt checkpoint: {msg}"));
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let meta_raw = r.block().ok_or_else(|| bad("truncated metadata"))?;
        let meta_text = std::str::from_utf8(meta_raw).map_err(|_| bad("metadata is not UTF-8"))?;
        let mut meta = Vec::new();
        for line in meta_text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("metadata line without '='"))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = r.u32().ok_or_else(|| bad("truncated tensor count"))?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = r.block().ok_or_else(|| bad("truncated tensor name"))?;
            let name = std::str::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
            let rank = r.u32().ok_or_else(|| bad("truncated rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(|| bad("truncated shape"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_bits(r.u64().ok_or_else(|| bad("truncated values"))?));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn block(&mut self) -> Option<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
