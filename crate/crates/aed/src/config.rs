//! Flat `key=value` run configuration with `#` comments. Unknown keys
//! are rejected rather than silently ignored; command-line `--set`
//! overrides reuse the same keys.

use crate::dataset::RenderSettings;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub render: RenderSettings,
    pub enc: EncoderConfig,
    pub dec_hidden_size: usize,
    pub dec_embed_dim: usize,
    pub dec_attention_dim: usize,
    pub dec_max_decode_len: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            render: RenderSettings::default(),
            enc: EncoderConfig::desk(),
            dec_hidden_size: 64,
            dec_embed_dim: 32,
            dec_attention_dim: 64,
            dec_max_decode_len: 40,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    i + 1
                )));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "render.height" => self.render.height = num(key, value)?,
            "render.stroke_width" => self.render.stroke_width = num(key, value)?,
            "render.max_width" => self.render.max_width = num(key, value)?,
            "enc.profile" => {
                self.enc = match value {
                    "full" => EncoderConfig::full(),
                    "desk" => EncoderConfig::desk(),
                    "toy" => EncoderConfig::toy(),
                    other => {
                        return Err(Error::Config(format!("unknown encoder profile {other:?}")))
                    }
                }
            }
            "enc.init_channels" => self.enc.init_channels = num(key, value)?,
            "enc.growth_rate" => self.enc.growth_rate = num(key, value)?,
            "enc.block_depth" => self.enc.block_depth = num(key, value)?,
            "enc.n_blocks" => self.enc.n_blocks = num(key, value)?,
            "enc.compression" => self.enc.compression = num(key, value)?,
            "dec.hidden_size" => self.dec_hidden_size = num(key, value)?,
            "dec.embed_dim" => self.dec_embed_dim = num(key, value)?,
            "dec.attention_dim" => self.dec_attention_dim = num(key, value)?,
            "dec.max_decode_len" => self.dec_max_decode_len = num(key, value)?,
            "train.initial_lr" => self.train.initial_lr = num(key, value)?,
            "train.lr_decay_factor" => self.train.lr_decay_factor = num(key, value)?,
            "train.plateau_patience" => self.train.plateau_patience = num(key, value)?,
            "train.stop_lr" => self.train.stop_lr = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.max_epochs" => self.train.max_epochs = num(key, value)?,
            "train.seed" => self.train.seed = num(key, value)?,
            "train.optimizer" => {
                self.train.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd-momentum" => OptimizerKind::SgdMomentum,
                    other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
                }
            }
            "train.early_stop_cer" => {
                self.train.early_stop_cer = if value == "none" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn decoder_config(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            vocab_size,
            annotation_dim: self.enc.out_channels(),
            hidden_size: self.dec_hidden_size,
            embed_dim: self.dec_embed_dim,
            attention_dim: self.dec_attention_dim,
            max_decode_len: self.dec_max_decode_len,
        }
    }
}
