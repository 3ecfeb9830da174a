//! Versioned binary container for named f32 tensors plus a key-value header.
//!
//! Layout (little-endian): magic `VAEXCKPT`, `u32` version, `u32` header
//! length, header text, `u32` tensor count, then per tensor `u32` name
//! length, name, `u32` rank, `u32` dims, f32 data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VAEXCKPT";
pub const VERSION: u32 = 1;

const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: KvMap,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("checkpoint truncated".into())
    } else {
        Error::Io(e)
    }
}

impl Checkpoint {
    pub fn new(header: KvMap) -> Self {
        Self { header, tensors: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        let header = self.header.to_text();
        put_u32(w, header.len() as u32)?;
        w.write_all(header.as_bytes())?;
        put_u32(w, self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            put_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            put_u32(w, t.shape().len() as u32)?;
            for &d in t.shape() {
                put_u32(w, d as u32)?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let hlen = get_u32(r)? as usize;
        let mut hbytes = vec![0u8; hlen];
        r.read_exact(&mut hbytes).map_err(truncated)?;
        let text = String::from_utf8(hbytes).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let header = KvMap::parse(&text)?;
        let count = get_u32(r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = get_u32(r)?;
            if nlen > MAX_NAME {
                return Err(Error::Format("tensor name too long".into()));
            }
            let mut nb = vec![0u8; nlen as usize];
            r.read_exact(&mut nb).map_err(truncated)?;
            let name = String::from_utf8(nb).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = get_u32(r)?;
            if rank > MAX_RANK {
                return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = Vec::new();
            r.take(numel as u64 * 4).read_to_end(&mut raw)?;
            if raw.len() != numel * 4 {
                return Err(Error::Format("checkpoint truncated".into()));
            }
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Self { header, tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        // write-then-rename so readers never observe a partial file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut h = KvMap::new();
        h.set("kind", "test");
        let mut c = Checkpoint::new(h);
        c.tensors.push(("a.weight".into(), Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-8, f32::MAX]).unwrap()));
        c.tensors.push(("s".into(), Tensor::scalar(7.0)));
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::read_from(&mut c.to_bytes().as_slice()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_version_and_truncation() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::read_from(&mut bytes.as_slice()), Err(Error::UnsupportedVersion(2))));
        assert!(Checkpoint::read_from(&mut &b"NOTACKPT"[..]).is_err());
    }
}
