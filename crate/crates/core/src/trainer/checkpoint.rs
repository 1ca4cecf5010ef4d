//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MCST" | version u32 | tensor count u32
//! per tensor: name len u16 | name utf-8 | ndim u8 | dims u64 x ndim | f32 x numel
//! json len u32 | json utf-8
//! crc32 u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MCST";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Raw file contents: named tensors plus a JSON metadata blob.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub tensors: Vec<NamedTensor>,
    pub json: String,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl CheckpointFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| format_err(format!("tensor name too long: {}", t.name)))?;
            let ndim = u8::try_from(t.shape.len()).map_err(|_| format_err(format!("too many dims in {}", t.name)))?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::shape(format!("tensor {} data does not match shape {:?}", t.name, t.shape)));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(ndim);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let json = self.json.as_bytes();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CheckpointFile> {
        if bytes.len() < 16 {
            return Err(format_err(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(format_err("bad magic bytes"));
        }
        let (body, footer) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported version {version}, expected {FORMAT_VERSION}")));
        }
        let stored_crc = u32::from_le_bytes(footer.try_into().expect("4-byte footer"));
        if crc32fast::hash(body) != stored_crc {
            return Err(format_err("checksum mismatch (truncated or corrupted file)"));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| format_err("tensor name is not utf-8"))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| format_err(format!("tensor {name} size overflows")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| format_err("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let json_len = r.u32()? as usize;
        let json = String::from_utf8(r.take(json_len)?.to_vec()).map_err(|_| format_err("metadata is not utf-8"))?;
        if r.pos != body.len() {
            return Err(format_err(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(CheckpointFile { tensors, json })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CheckpointFile> {
        CheckpointFile::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format_err(format!("unexpected end of file at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
