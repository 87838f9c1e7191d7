//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RAMPCKPT" | version u32
//! meta json (u32 length + bytes)
//! decoder config json (u32 length + bytes)
//! tensor count u32, then per tensor: name (u32 len + bytes), ndim u32,
//!     dims u64 each, f64 values
//! optimizer flag u8; when 1: step u64 followed by first and second
//!     moments for every tensor in the same order (f64 values only)
//! sha-256 of everything above (32 bytes)
//! ```
//!
//! The digest is verified before anything is parsed, so a damaged file never
//! yields a partially loaded model.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{RampError, Result};
use crate::tensor::Tensor;
use crate::training::AdamState;

const MAGIC: &[u8; 8] = b"RAMPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DecoderConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
    /// Free-form run metadata (effective config, fingerprint, stage).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_decoder(dec: &Decoder, optimizer: Option<AdamState>, meta: serde_json::Value) -> Self {
        Checkpoint {
            config: dec.config().clone(),
            params: dec.named().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer,
            meta,
        }
    }

    pub fn decoder(&self) -> Result<Decoder> {
        Decoder::from_named(self.config.clone(), self.params.clone())
    }

    /// Rejects a checkpoint whose tensors do not fit a decoder built from
    /// `expected`, naming both shapes of the first disagreement.
    pub fn check_compatible(&self, expected: &DecoderConfig) -> Result<()> {
        let template = Decoder::new(expected.clone(), 0)?;
        for (name, want) in template.named() {
            match self.params.iter().find(|(n, _)| n == name) {
                None => return Err(RampError::Integrity(format!("checkpoint lacks parameter `{name}`"))),
                Some((_, have)) if have.shape() != want.shape() => {
                    return Err(RampError::Integrity(format!(
                        "parameter `{name}`: checkpoint has shape {:?}, model expects {:?}",
                        have.shape(),
                        want.shape()
                    )))
                }
                _ => {}
            }
        }
        if self.params.len() != template.names().len() {
            return Err(RampError::Integrity(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                template.names().len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_u32(&mut b, VERSION);
        put_str(&mut b, &self.meta.to_string());
        put_str(&mut b, &serde_json::to_string(&self.config).expect("config serializes"));
        put_u32(&mut b, self.params.len() as u32);
        for (name, t) in &self.params {
            put_str(&mut b, name);
            put_u32(&mut b, t.shape().len() as u32);
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut b, t.data());
        }
        match &self.optimizer {
            None => b.push(0),
            Some(st) => {
                b.push(1);
                b.extend_from_slice(&st.step.to_le_bytes());
                for m in &st.m {
                    put_f64s(&mut b, m);
                }
                for v in &st.v {
                    put_f64s(&mut b, v);
                }
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(RampError::Integrity("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(RampError::Integrity("checksum mismatch (file truncated or corrupt)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(RampError::Integrity(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let meta: serde_json::Value =
            serde_json::from_str(&r.string()?).map_err(|e| RampError::Integrity(format!("bad metadata: {e}")))?;
        let config: DecoderConfig =
            serde_json::from_str(&r.string()?).map_err(|e| RampError::Integrity(format!("bad decoder config: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape.iter().product();
            let data = r.f64s(n)?;
            params.push((name, Tensor::new(shape, data)?));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let m = params.iter().map(|(_, t)| r.f64s(t.len())).collect::<Result<Vec<_>>>()?;
                let v = params.iter().map(|(_, t)| r.f64s(t.len())).collect::<Result<Vec<_>>>()?;
                Some(AdamState { step, m, v })
            }
            f => return Err(RampError::Integrity(format!("bad optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(RampError::Integrity("trailing bytes after checkpoint body".into()));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| RampError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| RampError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

fn put_f64s(b: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| RampError::Integrity("unexpected end of checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| RampError::Integrity("invalid utf-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| RampError::Integrity("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
