//! Versioned binary model checkpoints.
//!
//! Layout (little-endian): magic `SACNNCKPT`, `u32` version, tag string,
//! named metadata arrays, layer table, then every parameter and buffer tensor
//! as raw `f64` in layer order. Strings are `u32` length + UTF-8.

use std::path::Path;

use super::layers::LayerKind;
use super::model::Model;
use crate::{Error, Result};

pub const MAGIC: &[u8; 9] = b"SACNNCKPT";
pub const VERSION: u32 = 1;

/// A model plus a free-form tag and named numeric metadata (for example
/// feature standardization vectors).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tag: String,
    pub metadata: Vec<(String, Vec<f64>)>,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(tag: impl Into<String>, model: Model) -> Self {
        Self {
            tag: tag.into(),
            metadata: Vec::new(),
            model,
        }
    }

    pub fn with_metadata(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.metadata.push((name.into(), values));
        self
    }

    pub fn metadata(&self, name: &str) -> Option<&[f64]> {
        self.metadata.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.tag);
        put_u32(&mut out, self.metadata.len() as u32);
        for (name, values) in &self.metadata {
            put_str(&mut out, name);
            put_u64(&mut out, values.len() as u64);
            values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        let layers = self.model.layers();
        put_u32(&mut out, layers.len() as u32);
        for l in layers {
            encode_kind(&mut out, l.kind());
        }
        for l in layers {
            for p in l.params() {
                p.value.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
            for b in l.buffers() {
                b.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let tag = r.string()?;
        let n_meta = r.u32()?;
        let mut metadata = Vec::new();
        for _ in 0..n_meta {
            let name = r.string()?;
            let len = r.u64()? as usize;
            metadata.push((name, r.f64s(len)?));
        }
        let n_layers = r.u32()?;
        let kinds = (0..n_layers).map(|_| decode_kind(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut model = Model::new(kinds).map_err(|e| Error::Checkpoint(format!("layer table: {e}")))?;
        for layer in model.layers_mut() {
            for p in layer.params_mut() {
                let vals = r.f64s(p.value.len())?;
                p.value.data_mut().copy_from_slice(&vals);
            }
            for b in layer.buffers_mut() {
                let vals = r.f64s(b.len())?;
                b.data_mut().copy_from_slice(&vals);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after parameter payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { tag, metadata, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the stored architecture equals `expected`.
    pub fn expect_architecture(&self, expected: &[LayerKind]) -> Result<()> {
        let got = self.model.kinds();
        if got != expected {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: stored {} layers, expected {}",
                got.len(),
                expected.len()
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn encode_kind(out: &mut Vec<u8>, kind: &LayerKind) {
    let (code, fields): (u8, Vec<u64>) = match *kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            bias,
        } => (
            1,
            vec![in_channels as u64, out_channels as u64, kernel as u64, stride as u64, bias as u64],
        ),
        LayerKind::BatchNorm { features } => (2, vec![features as u64]),
        LayerKind::Relu => (3, vec![]),
        LayerKind::Softplus => (4, vec![]),
        LayerKind::Dropout { rate } => (5, vec![rate.to_bits()]),
        LayerKind::Dense { inputs, outputs } => (6, vec![inputs as u64, outputs as u64]),
        LayerKind::Flatten => (7, vec![]),
        LayerKind::Softmax => (8, vec![]),
        LayerKind::GlobalAvgPool => (9, vec![]),
    };
    out.push(code);
    fields.iter().for_each(|&f| put_u64(out, f));
}

fn decode_kind(r: &mut Reader) -> Result<LayerKind> {
    let code = r.take(1)?[0];
    let kind = match code {
        1 => LayerKind::Conv2d {
            in_channels: r.u64()? as usize,
            out_channels: r.u64()? as usize,
            kernel: r.u64()? as usize,
            stride: r.u64()? as usize,
            bias: r.u64()? != 0,
        },
        2 => LayerKind::BatchNorm {
            features: r.u64()? as usize,
        },
        3 => LayerKind::Relu,
        4 => LayerKind::Softplus,
        5 => LayerKind::Dropout {
            rate: f64::from_bits(r.u64()?),
        },
        6 => LayerKind::Dense {
            inputs: r.u64()? as usize,
            outputs: r.u64()? as usize,
        },
        7 => LayerKind::Flatten,
        8 => LayerKind::Softmax,
        9 => LayerKind::GlobalAvgPool,
        c => return Err(Error::Checkpoint(format!("unknown layer code {c}"))),
    };
    Ok(kind)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
