//! `CFCK` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     4 bytes  "CFCK"
//! version   u32
//! sections  u32
//! per section:
//!   name_len u32, name (UTF-8)
//!   len      u64, payload
//! ```
//!
//! JSON sections hold configuration and metadata. Tensor-list sections hold
//! `count: u32` followed by, per tensor, `name_len: u32`, name, `ndim: u32`,
//! `dims: u64 × ndim` and the values as `f64`.

use std::fs;
use std::path::Path;

use routecast_tensor::{Real, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    sections: Vec<(String, Vec<u8>)>,
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
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("section name is not UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    /// Add or replace a raw section.
    pub fn put(&mut self, name: &str, payload: Vec<u8>) {
        match self.sections.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = payload,
            None => self.sections.push((name.to_string(), payload)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, p)| p.as_slice())
    }

    fn require(&self, name: &str) -> Result<&[u8]> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no `{name}` section")))
    }

    pub fn put_json<S: Serialize>(&mut self, name: &str, value: &S) {
        self.put(name, serde_json::to_vec(value).expect("section serializes"));
    }

    pub fn json<D: DeserializeOwned>(&self, name: &str) -> Result<D> {
        serde_json::from_slice(self.require(name)?).map_err(|e| Error::Format(format!("section `{name}`: {e}")))
    }

    pub fn put_tensors<T: Real>(&mut self, name: &str, tensors: &[(String, Tensor<T>)]) {
        let mut out = Vec::new();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (tname, t) in tensors {
            put_str(&mut out, tname);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
        self.put(name, out);
    }

    pub fn tensors(&self, name: &str) -> Result<Vec<(String, Tensor<f64>)>> {
        let mut r = Reader {
            bytes: self.require(name)?,
            pos: 0,
        };
        let count = r.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let tname = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{tname}` is too large")))?;
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push((tname, Tensor::new(&shape, data)?));
        }
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            put_str(&mut out, name);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(MAGIC) {
            return Err(Error::Format("not a CFCK checkpoint".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Compat(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let name = r.string()?;
            let len = r.len()?;
            sections.push((name, r.take(len)?.to_vec()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("cfck.tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut c = Checkpoint::new();
        c.put_json("meta", &serde_json::json!({"epoch": 3, "lr": 0.1}));
        let ts = vec![
            (
                "a".to_string(),
                Tensor::new(&[2, 2], vec![0.1f32, -1e-30, 3.5, f32::MAX]).unwrap(),
            ),
            ("b".to_string(), Tensor::new(&[0], Vec::<f32>::new()).unwrap()),
        ];
        c.put_tensors("params", &ts);
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        let t = back.tensors("params").unwrap();
        assert_eq!(t[0].1.cast::<f32>(), ts[0].1);
        assert_eq!(t[1].1.shape(), &[0]);
        let meta: serde_json::Value = back.json("meta").unwrap();
        assert_eq!(meta["epoch"], 3);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Checkpoint::new();
        c.put("x", vec![1, 2, 3]);
        let bytes = c.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(b"NOPE").is_err());
        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(matches!(Checkpoint::decode(&v2), Err(Error::Compat(_))));
        assert!(c.tensors("missing").is_err());
    }
}
