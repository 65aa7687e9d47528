//! Binary model checkpoints. Layout: magic `AEDCKPT1`, a length-prefixed
//! config block (encoder + decoder dims, vocabulary hash, epoch, best
//! validation CER), then a u32 tensor count followed by named tensors:
//! u16 name length + UTF-8 name + u8 rank + u32 extents + raw f32 values.
//! All integers and floats little-endian; values stored as f32.

use std::fs;
use std::path::Path;

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Scalar;

const MAGIC: &[u8; 8] = b"AEDCKPT1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub enc_cfg: EncoderConfig,
    pub dec_cfg: DecoderConfig,
    pub vocab_hash: u64,
    pub epoch: usize,
    pub best_cer: f64,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(
        model: &Model<T>,
        vocab_hash: u64,
        epoch: usize,
        best_cer: f64,
    ) -> Self {
        let tensors = model
            .named_params()
            .into_iter()
            .map(|(name, t)| {
                let vals = t.to_vec().iter().map(|&v| Scalar::to_f32(v)).collect();
                (name, t.shape().to_vec(), vals)
            })
            .collect();
        Checkpoint {
            enc_cfg: model.enc.cfg.clone(),
            dec_cfg: model.dec.cfg.clone(),
            vocab_hash,
            epoch,
            best_cer,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut cfg = Vec::new();
        for v in [
            self.enc_cfg.init_channels,
            self.enc_cfg.growth_rate,
            self.enc_cfg.block_depth,
            self.enc_cfg.n_blocks,
        ] {
            cfg.extend((v as u32).to_le_bytes());
        }
        cfg.extend(self.enc_cfg.compression.to_le_bytes());
        for v in [
            self.dec_cfg.vocab_size,
            self.dec_cfg.annotation_dim,
            self.dec_cfg.hidden_size,
            self.dec_cfg.embed_dim,
            self.dec_cfg.attention_dim,
            self.dec_cfg.max_decode_len,
        ] {
            cfg.extend((v as u32).to_le_bytes());
        }
        cfg.extend(self.vocab_hash.to_le_bytes());
        cfg.extend((self.epoch as u64).to_le_bytes());
        cfg.extend(self.best_cer.to_le_bytes());

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend((cfg.len() as u32).to_le_bytes());
        out.extend(cfg);
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, shape, vals) in &self.tensors {
            out.extend((name.len() as u16).to_le_bytes());
            out.extend(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend((d as u32).to_le_bytes());
            }
            for &v in vals {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let cfg_len = r.u32("config length")? as usize;
        let cfg_end = r.pos + cfg_len;
        let enc_cfg = EncoderConfig {
            init_channels: r.u32("config")? as usize,
            growth_rate: r.u32("config")? as usize,
            block_depth: r.u32("config")? as usize,
            n_blocks: r.u32("config")? as usize,
            compression: r.f64("config")?,
        };
        let dec_cfg = DecoderConfig {
            vocab_size: r.u32("config")? as usize,
            annotation_dim: r.u32("config")? as usize,
            hidden_size: r.u32("config")? as usize,
            embed_dim: r.u32("config")? as usize,
            attention_dim: r.u32("config")? as usize,
            max_decode_len: r.u32("config")? as usize,
        };
        let vocab_hash = r.u64("config")?;
        let epoch = r.u64("config")? as usize;
        let best_cer = r.f64("config")?;
        if r.pos != cfg_end {
            return Err(Error::Checkpoint("config block length mismatch".into()));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name not UTF-8".into()))?;
            let rank = r.take(1, &name)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&name)? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(4 * numel, &name)?;
            let vals = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, shape, vals));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint {
            enc_cfg,
            dec_cfg,
            vocab_hash,
            epoch,
            best_cer,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Copy stored tensors into an existing model. Every model parameter
    /// must be present with a matching shape; stored tensors unknown to
    /// the model are rejected. Errors name the offending tensor.
    pub fn apply_to<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        let params = model.named_params();
        for (name, _, _) in &self.tensors {
            if !params.iter().any(|(n, _)| n == name) {
                return Err(Error::Checkpoint(format!("unknown tensor name {name:?}")));
            }
        }
        for (name, t) in &params {
            let Some((_, shape, vals)) = self.tensors.iter().find(|(n, _, _)| n == name) else {
                return Err(Error::Checkpoint(format!("missing tensor {name:?}")));
            };
            if shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} shape {:?} in file vs {:?} in model",
                    shape,
                    t.shape()
                )));
            }
            let mut d = t.data_mut();
            for (dst, &src) in d.iter_mut().zip(vals.iter()) {
                *dst = T::from_f32(src);
            }
        }
        Ok(())
    }

    /// Rebuild a model from the stored configs and weights.
    pub fn build_model<T: Scalar>(&self) -> Result<Model<T>> {
        let model = Model::new(self.enc_cfg.clone(), self.dec_cfg.clone(), 0)?;
        self.apply_to(&model)?;
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }
}
