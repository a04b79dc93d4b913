//! Versioned binary checkpoint.
//!
//! Layout (little-endian): magic `HBCKPT\0\1`, `u32` version, `u64` embed_dim,
//! `u64` num_classes, `u32` layer count, per layer `u64` in, `u64` out, `u8`
//! activation tag; then every parameter as `f64` (per layer weight then bias,
//! then centers), a `u8` flag followed by the momentum buffers in the same
//! block order, and finally a SHA-256 digest of all preceding bytes.

use std::path::Path;

use super::matrix::Matrix;
use super::model::{Activation, EmbeddingModel, Layer};
use super::sgd::SgdState;
use crate::codec::{self, DigestError, Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HBCKPT\0\x01";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EmbeddingModel,
    pub optimizer: Option<SgdState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(m.embed_dim() as u64);
        w.u64(m.num_classes() as u64);
        w.u32(m.layers().len() as u32);
        for l in m.layers() {
            w.u64(l.input_dim() as u64);
            w.u64(l.output_dim() as u64);
            w.u8(l.activation.tag());
        }
        for block in m.param_blocks() {
            w.f64s(block);
        }
        match &self.optimizer {
            Some(state) => {
                w.u8(1);
                for b in &state.buffers {
                    w.f64s(b);
                }
            }
            None => w.u8(0),
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut head = Reader::unverified(data);
        if head.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = head.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let mut r = Reader::verified(data).map_err(|e| Error::Corruption {
            path: path.to_path_buf(),
            message: match e {
                DigestError::Truncated => "file shorter than its checksum".into(),
                DigestError::Mismatch => "checksum mismatch".into(),
            },
        })?;
        r.take(MAGIC.len() + 4)?;
        let embed_dim = r.u64()? as usize;
        let num_classes = r.u64()? as usize;
        let n_layers = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(n_layers.min(64));
        for _ in 0..n_layers {
            let input = r.u64()? as usize;
            let output = r.u64()? as usize;
            let tag = r.u8()?;
            let act = Activation::from_tag(tag)
                .ok_or_else(|| r.error(format!("unknown activation tag {tag}")))?;
            shapes.push((input, output, act));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for &(input, output, activation) in &shapes {
            let weight = Matrix::from_vec(output, input, r.f64s(input * output)?)?;
            let bias = r.f64s(output)?;
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        let centers = Matrix::from_vec(num_classes, embed_dim, r.f64s(num_classes * embed_dim)?)?;
        let model = EmbeddingModel::from_parts(layers, centers)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let sizes: Vec<usize> = model.param_blocks().iter().map(|b| b.len()).collect();
                let mut buffers = Vec::with_capacity(sizes.len());
                for n in sizes {
                    buffers.push(r.f64s(n)?);
                }
                Some(SgdState { buffers })
            }
            other => return Err(r.error(format!("bad optimizer flag {other}"))),
        };
        r.expect_end()?;
        Ok(Self { model, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?, path)
    }
}
