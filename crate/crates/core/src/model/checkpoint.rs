//! Named-tensor checkpoint files.
//!
//! `CDFW`, `u32` version (1), `u32` tensor count, then per tensor: `u16` name
//! length, UTF-8 name, `u8` rank, `u32` extents, little-endian `f32` payload.
//! All integers are little-endian.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CDFW";
const VERSION: u32 = 1;

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or_else(|| Error::Format("length overflow".into()))?;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.ndim())
                .map_err(|_| Error::Checkpoint(format!("{name}: rank {} too large", t.ndim())))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Checkpoint(format!("{name}: extent {d} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing CDFW magic bytes".into()));
        }
        let mut cur = Cursor { bytes, at: 4 };
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported CDFW version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut seen = HashSet::new();
        // every tensor needs at least 2 + 1 bytes of header
        let mut tensors = Vec::with_capacity(count.min(bytes.len() / 3));
        for i in 0..count {
            let len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
                .to_owned();
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name {name}")));
            }
            let rank = cur.u8()? as usize;
            if rank == 0 {
                return Err(Error::Format(format!("{name}: rank 0")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = cur.u32()? as usize;
                if d == 0 {
                    return Err(Error::Format(format!("{name}: zero extent")));
                }
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format(format!("{name}: extents overflow")))?;
                shape.push(d);
            }
            let nbytes = numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format(format!("{name}: extents overflow")))?;
            let payload = cur.take(nbytes)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("{name}: non-finite value")));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if cur.at != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - cur.at
            )));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
