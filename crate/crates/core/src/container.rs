//! Self-describing binary container used by checkpoints, prefix files and
//! representation files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes
//! version     u32
//! header_len  u32, then header_len bytes of UTF-8 JSON
//! dtype       u8   (4 = f32, 8 = f64)
//! n_tensors   u32
//! per tensor: name_len u32, name bytes, rank u32, dims u64 * rank, raw payload
//! checksum    32 bytes SHA-256 over everything above
//! ```
//!
//! Payloads are kept as raw bytes so a load/save cycle is bit-exact.

use std::fs;
use std::path::Path;

use prefixrep_tensor::{DType, Scalar, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 8],
    pub version: u32,
    pub header: serde_json::Value,
    pub dtype: DType,
    pub tensors: Vec<RawTensor>,
}

impl Container {
    pub fn new(magic: [u8; 8], version: u32, header: serde_json::Value, dtype: DType) -> Self {
        Container { magic, version, header, dtype, tensors: Vec::new() }
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        debug_assert_eq!(T::DTYPE, self.dtype);
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size_of());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        self.tensors.push(RawTensor { name: name.into(), shape: t.shape().to_vec(), bytes });
    }

    /// Decode a stored tensor, converting precision if the file's dtype differs from `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let raw = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))?;
        let width = self.dtype.size_of();
        let values: Vec<T> = match self.dtype {
            DType::F32 => raw.bytes.chunks_exact(width).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.bytes.chunks_exact(width).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
        };
        Ok(Tensor::new(raw.shape.clone(), values)?)
    }

    pub fn header_field<V: serde::de::DeserializeOwned>(&self, key: &str) -> Result<V> {
        let v = self.header.get(key).ok_or_else(|| Error::Format(format!("header field '{key}' absent")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("header field '{key}': {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("JSON values always serialize");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.push(self.dtype.code());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parse and verify. `expected_magic` and `expected_version` are checked
    /// after the checksum so corruption is reported as such.
    pub fn from_bytes(bytes: &[u8], expected_magic: &[u8; 8], expected_version: u32) -> Result<Self> {
        if bytes.len() < 8 + 4 + 4 + 1 + 4 + 32 {
            return Err(Error::Format("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity);
        }
        let mut r = Reader { buf: body, pos: 0 };
        let magic: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
        if &magic != expected_magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(expected_magic)
            )));
        }
        let version = r.u32()?;
        if version != expected_version {
            return Err(Error::Version { found: version, expected: expected_version });
        }
        let hlen = r.u32()? as usize;
        let header = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("header: {e}")))?;
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Format("unknown dtype".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Format("tensor name".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let bytes = r.take(n * dtype.size_of())?.to_vec();
            tensors.push(RawTensor { name, shape, bytes });
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes before checksum".into()));
        }
        Ok(Container { magic, version, header, dtype, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, expected_magic: &[u8; 8], expected_version: u32) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_magic, expected_version)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// SHA-256 over tensors in order, hashing names, shapes and values widened to f64
/// so that the digest does not depend on the storage precision of f32 data.
pub fn checksum_tensors<'a, T: Scalar + 'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        buf.clear();
        for &v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTCTNR";

    fn sample() -> Container {
        let mut c = Container::new(*MAGIC, 3, serde_json::json!({"name": "x", "n": 2}), DType::F32);
        c.push_tensor("a", &Tensor::<f32>::from_f64(&[2, 2], &[1.0, -2.5, 3.25, 1e-7]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = sample().to_bytes();
        let back = Container::from_bytes(&bytes, MAGIC, 3).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes(), bytes);
        let t: Tensor<f64> = back.tensor("a").unwrap();
        assert_eq!(t.shape(), &[2, 2]);
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let mut bytes = sample().to_bytes();
        bytes[20] ^= 0x01;
        assert!(matches!(Container::from_bytes(&bytes, MAGIC, 3), Err(Error::Integrity)));
        let bytes = sample().to_bytes();
        assert!(matches!(Container::from_bytes(&bytes, MAGIC, 4), Err(Error::Version { found: 3, expected: 4 })));
        assert!(matches!(Container::from_bytes(&bytes, b"OTHERMAG", 3), Err(Error::Format(_))));
    }
}
