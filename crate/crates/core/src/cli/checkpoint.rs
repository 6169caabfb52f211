//! `SIGNCKPT` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SIGNCKPT" | version u32 | record count u32
//! per record: name length u32 | UTF-8 name | rank u32 | extents u64 x rank | f32 payload
//! ```
//!
//! Records keep insertion order, so writing the same records twice yields
//! the same bytes.

use std::fs;
use std::path::Path;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SIGNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a record; names must be unique.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Checkpoint(format!(
                "record {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {name}")));
        }
        self.records.push(Record { name, shape, data });
        Ok(())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.push(name, t.shape().to_vec(), t.data().iter().map(|&v| v as f32).collect())
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) -> Result<()> {
        self.push(name, vec![], vec![v as f32])
    }

    /// Integers up to 2^24 survive the f32 payload exactly; larger ones are split.
    pub fn push_count(&mut self, name: impl Into<String>, v: u64) -> Result<()> {
        let lo = (v & 0xff_ffff) as f32;
        let mid = ((v >> 24) & 0xff_ffff) as f32;
        let hi = (v >> 48) as f32;
        self.push(name, vec![3], vec![lo, mid, hi])
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) -> Result<()> {
        self.push(name, vec![bytes.len()], bytes.iter().map(|&b| b as f32).collect())
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Record> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let r = self.require(name)?;
        Tensor::new(r.shape.clone(), r.data.iter().map(|&v| v as f64).collect())
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let r = self.require(name)?;
        match r.data.as_slice() {
            [v] if r.shape.is_empty() => Ok(*v as f64),
            _ => Err(Error::Checkpoint(format!("record {name} is not a scalar"))),
        }
    }

    pub fn count(&self, name: &str) -> Result<u64> {
        let r = self.require(name)?;
        match r.data.as_slice() {
            &[lo, mid, hi] => Ok(lo as u64 | (mid as u64) << 24 | (hi as u64) << 48),
            _ => Err(Error::Checkpoint(format!("record {name} is not a count"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        let r = self.require(name)?;
        r.data
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Checkpoint(format!("record {name} holds a non-byte value {v}")))
                }
            })
            .collect()
    }

    /// Names starting with `prefix`, in file order.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.records
            .iter()
            .map(|r| r.name.as_str())
            .filter(move |n| n.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &e in &r.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a SIGNCKPT file".into()));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {VERSION}"
            )));
        }
        let n = rd.u32()? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..n {
            let len = rd.u32()? as usize;
            let name = std::str::from_utf8(rd.take(len)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let rank = rd.u32()? as usize;
            let shape = (0..rank)
                .map(|_| rd.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Checkpoint(format!("record {name}: extents overflow")))?;
            let payload = rd.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("payload overflow".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ck.push(name, shape, data)?;
        }
        if rd.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - rd.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
