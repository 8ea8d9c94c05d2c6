//! Binary parameter container shared by the codec and the denoiser.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes  "DWCK"
//! version   u16
//! kind      u16 length + UTF-8
//! meta      u32 length + UTF-8 TOML
//! count     u32
//! tensors   count x { name: u16 length + UTF-8, ndim: u8, dims: ndim x u32, data: f32 x prod(dims) }
//! crc32     u32 over every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DWCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// What the file holds, e.g. `codec` or `denoiser`.
    pub kind: String,
    /// Free-form TOML with configuration and training metadata.
    pub meta: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: impl Into<String>) -> Self {
        Self { kind: kind.into(), meta: meta.into(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor { name: name.into(), shape, data });
    }

    /// Appends every parameter under `prefix`.
    pub fn push_params(&mut self, prefix: &str, ps: &ParamStore<f32>) {
        for (name, t) in ps.iter() {
            self.push(format!("{prefix}{name}"), t.shape.clone(), t.data.clone());
        }
    }

    /// Appends a list of buffers shaped like `ps` under `prefix`.
    pub fn push_like(&mut self, prefix: &str, ps: &ParamStore<f32>, bufs: &[Vec<f32>]) {
        for ((name, t), b) in ps.iter().zip(bufs) {
            self.push(format!("{prefix}{name}"), t.shape.clone(), b.clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Malformed(format!("checkpoint has no tensor {name}")))
    }

    /// Overwrites `ps` from tensors stored under `prefix`.
    pub fn load_params(&self, prefix: &str, ps: &mut ParamStore<f32>) -> Result<()> {
        let mut src = ParamStore::new();
        for (name, _) in ps.iter() {
            let t = self.get(&format!("{prefix}{name}"))?;
            src.add(name, Tensor { shape: t.shape.clone(), data: t.data.clone() });
        }
        ps.load_from(&src)
    }

    /// Buffers shaped like `ps` stored under `prefix`.
    pub fn load_like(&self, prefix: &str, ps: &ParamStore<f32>) -> Result<Vec<Vec<f32>>> {
        ps.iter()
            .map(|(name, t)| {
                let s = self.get(&format!("{prefix}{name}"))?;
                if s.shape != t.shape {
                    return Err(Error::Shape(format!("{prefix}{name}: expected {:?}, found {:?}", t.shape, s.shape)));
                }
                Ok(s.data.clone())
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str16(&mut out, &self.kind);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str16(&mut out, &t.name);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("checkpoint shorter than its magic".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            });
        }
        if bytes.len() < 10 {
            return Err(Error::Truncated("checkpoint header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Version { found: version, supported: VERSION });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 6 };
        let kind = r.str16()?;
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Malformed("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.str16()?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Malformed("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Fails unless the file holds the expected kind.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Malformed(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}

fn put_str16(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn str16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Malformed("name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("test", "a = 1\n");
        c.push("w", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.25]);
        c.push("scalar", vec![], vec![42.0]);
        c
    }

    #[test]
    fn round_trip_and_reencode_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn detects_corruption() {
        let mut bytes = sample().to_bytes();
        let i = bytes.len() / 2;
        bytes[i] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn rejects_magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
        assert!(matches!(Checkpoint::from_bytes(b"DW"), Err(Error::Truncated(_))));
    }
}
