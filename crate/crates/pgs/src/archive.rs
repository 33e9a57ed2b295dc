//! Self-describing container of named `f64` arrays plus a text header.
//!
//! Layout, all integers little-endian:
//! magic `PGSARCH\0`, format version `u32`, header length `u64`, UTF-8
//! header, array count `u32`, then per array: name length `u32`, name,
//! rank `u32`, dims `u64 × rank`, values `f64 × product(dims)`.

use std::collections::BTreeMap;
use std::path::Path;

use pgs_core::Tensor;

use crate::error::{PgsError, Result};

pub const MAGIC: &[u8; 8] = b"PGSARCH\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub header: String,
    pub arrays: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u64).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(PgsError::format(path, "not a pgs archive (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(PgsError::Incompatible(format!(
                "{}: archive format version {version} is not supported (expected {FORMAT_VERSION})",
                path.display()
            )));
        }
        let header_len = r.len_u64()?;
        let header = String::from_utf8(r.take(header_len)?.to_vec())
            .map_err(|_| PgsError::format(path, "header is not UTF-8"))?;
        let count = r.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| PgsError::format(path, "array name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len_u64()?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| PgsError::format(path, format!("array `{name}` is truncated")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)?;
            if arrays.insert(name.clone(), t).is_some() {
                return Err(PgsError::format(path, format!("duplicate array `{name}`")));
            }
        }
        if r.remaining() != 0 {
            return Err(PgsError::format(path, format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| PgsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PgsError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(PgsError::format(
                self.path,
                format!(
                    "truncated: needed {n} bytes at offset {}, {} left",
                    self.pos,
                    self.remaining()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| PgsError::format(self.path, format!("length {v} out of range")))
    }
}
