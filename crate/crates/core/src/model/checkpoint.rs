//! Versioned binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PFCK"                       magic
//! u32                          format version
//! u32 + utf8                   header: "key=value\n" lines
//! u32                          tensor count
//! per tensor:
//!   u32 + utf8                 name
//!   u32, u64 × rank            shape
//!   f64 × numel                data (IEEE-754 bits)
//! [u8; 8]                      first 8 bytes of SHA-256 over everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

use super::backbone::Backbone;
use super::config::ModelConfig;

pub const MAGIC: &[u8; 4] = b"PFCK";
pub const FORMAT_VERSION: u32 = 1;

/// Header key naming what a container holds.
pub const KIND_KEY: &str = "kind";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(header: Vec<(String, String)>, params: ParamSet) -> Self {
        Self { header, params }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Checkpoint(format!("header is missing {key}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.header {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!(
                    "header entry {k:?}={v:?} is not representable"
                )));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        put_str(&mut out, &text);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let digest = file_digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a PFCK container".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        if file_digest(body) != trailer {
            return Err(Error::Checkpoint("trailing digest does not match contents".into()));
        }
        let mut r = Reader { buf: body, at: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let text = r.string()?;
        let mut header = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line {line:?}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| r.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            if params.index_of(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.at != body.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Whole-container digest, usable to compare two files by content.
    pub fn digest(&self) -> Result<u64> {
        let bytes = self.to_bytes()?;
        let d = &bytes[bytes.len() - 8..];
        Ok(u64::from_le_bytes(d.try_into().expect("8 bytes")))
    }
}

fn file_digest(bytes: &[u8]) -> [u8; 8] {
    let full = Sha256::digest(bytes);
    full[..8].try_into().expect("8 bytes")
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated container".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
    }
}

impl Backbone {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut header = vec![(KIND_KEY.to_string(), "backbone".to_string())];
        header.extend(self.config().to_pairs());
        Checkpoint::new(header, self.params().clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind = ckpt.require(KIND_KEY)?;
        if kind != "backbone" {
            return Err(Error::Checkpoint(format!(
                "expected a backbone container, found kind={kind}"
            )));
        }
        let config = ModelConfig::from_pairs(&ckpt.header)?;
        Backbone::from_params(config, ckpt.params.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
