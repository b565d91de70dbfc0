//! Binary container for named f64 tensors.
//!
//! ```text
//! magic[4] | version u32 | header_len u32 | header JSON | tensor_count u32
//! per tensor: name_len u32 | name | ndim u32 | dims u64* | values f64*
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BLOB_VERSION: u32 = 1;

pub fn hex_digest(hasher: Sha256) -> String {
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: ArrayD<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub magic: [u8; 4],
    pub header: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

impl Blob {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        put_u32(&mut out, BLOB_VERSION);
        let header = serde_json::to_vec(&self.header)?;
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_u32(&mut out, t.name.len() as u32);
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.value.ndim() as u32);
            for &d in t.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], expected_magic: [u8; 4]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("length checked");
        if magic != expected_magic {
            return Err(Error::format("blob", format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != BLOB_VERSION {
            return Err(Error::format("blob", format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header = serde_json::from_slice(r.take(header_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format("blob", "tensor name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let raw = r.take(len * 8)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let value =
                ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| Error::format("blob", e.to_string()))?;
            tensors.push(NamedTensor { name, value });
        }
        if r.pos != bytes.len() {
            return Err(Error::format("blob", "trailing bytes"));
        }
        Ok(Blob { magic, header, tensors })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let bytes = self.to_bytes()?;
        w.write_all(&bytes).map_err(|e| Error::io("<blob>", e))
    }

    pub fn read_from(r: &mut impl Read, expected_magic: [u8; 4]) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io("<blob>", e))?;
        Blob::from_bytes(&bytes, expected_magic)
    }

    pub fn take(&mut self, name: &str) -> Result<ArrayD<f64>> {
        let pos = self
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::format("blob", format!("missing tensor {name}")))?;
        Ok(self.tensors.swap_remove(pos).value)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("blob", "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
