//! Versioned binary container for named `f64` tensors plus a JSON header.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes   "GRCT"
//! version  u32       currently 1
//! kind     u32 len + UTF-8
//! header   u64 len + UTF-8 JSON
//! count    u32
//! tensor*  u32 name len + UTF-8 name, u32 rank, u64 dims[rank],
//!          f64 payload in row-major order
//! digest   32 bytes  SHA-256 of every preceding byte
//! ```

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{LayerSpec, Network};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GRCT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
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
            .ok_or_else(|| fmt_err("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| fmt_err("invalid UTF-8"))
    }
}

impl Container {
    pub fn new(kind: &str, header: impl Serialize) -> Result<Self> {
        Ok(Container {
            kind: kind.to_string(),
            header: serde_json::to_value(header)?,
            tensors: Vec::new(),
        })
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn header_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.header.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 {
            return Err(fmt_err("file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(fmt_err(format!(
                "container version {version} is not supported (expected {VERSION})"
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(fmt_err("checksum mismatch"));
        }
        let klen = r.u32()? as usize;
        let kind = r.string(klen)?;
        let hlen = r.u64()? as usize;
        let header = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = r.string(nlen)?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fmt_err("tensor size overflow"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| fmt_err("tensor size overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(fmt_err("trailing bytes after tensor table"));
        }
        Ok(Container {
            kind,
            header,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(fmt_err(format!("expected a {kind} container, found {}", self.kind)));
        }
        Ok(self)
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkHeader {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    tap: usize,
}

impl Network {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(
            "network",
            NetworkHeader {
                input_shape: self.input_shape().to_vec(),
                layers: self.layers().to_vec(),
                tap: self.tap(),
            },
        )?;
        for (i, p) in self.params().iter().enumerate() {
            c.push(&format!("param{i}"), p.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let c = c.expect_kind("network")?;
        let h: NetworkHeader = c.header_as()?;
        let params = c.tensors.into_iter().map(|(_, t)| t).collect();
        Network::from_parts(h.input_shape, h.layers, h.tap, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::network::Padding;
    use rand::SeedableRng;

    fn net() -> Network {
        Network::new(
            vec![1, 6, 6],
            vec![
                LayerSpec::Conv2d {
                    filters: 2,
                    kernel: 3,
                    padding: Padding::Same,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
            ],
            2,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap()
    }

    #[test]
    fn network_round_trip_is_exact() {
        let n = net();
        let bytes = n.to_container().unwrap().to_bytes().unwrap();
        let back = Network::from_container(Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(n, back);
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let bytes = net().to_container().unwrap().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Container::from_bytes(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[40] ^= 0xff;
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = net().to_container().unwrap().to_bytes().unwrap();
        bytes[4] = 9;
        let err = Container::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}
