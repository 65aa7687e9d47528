//! Encoder + decoder bundle: batched teacher-forced loss for training
//! and single-image greedy recognition.

use crate::decoder::{AttentionRecord, AttnDecoder, DecoderConfig};
use crate::encoder::{DenseNetEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::util::SplitMix64;
use crate::vocab::Vocabulary;

pub struct Model<T> {
    pub enc: DenseNetEncoder<T>,
    pub dec: AttnDecoder<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, seed: u64) -> Result<Self> {
        if dec_cfg.annotation_dim != enc_cfg.out_channels() {
            return Err(Error::Config(format!(
                "decoder annotation dim {} vs encoder channels {}",
                dec_cfg.annotation_dim,
                enc_cfg.out_channels()
            )));
        }
        let mut enc_rng = SplitMix64::derive(seed, 1);
        let mut dec_rng = SplitMix64::derive(seed, 2);
        Ok(Model {
            enc: DenseNetEncoder::new(enc_cfg, &mut enc_rng)?,
            dec: AttnDecoder::new(dec_cfg, &mut dec_rng)?,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.enc.named_params();
        out.extend(self.dec.named_params());
        out
    }

    /// Parameters the optimizer updates (running BN stats excluded).
    pub fn trainable_params(&self) -> Vec<(String, Tensor<T>)> {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| !n.ends_with(".mean") && !n.ends_with(".var"))
            .collect()
    }

    /// Mean teacher-forced cross-entropy of one padded batch.
    pub fn batch_loss(
        &self,
        tape: &Tape,
        images: &Tensor<T>,
        valid_widths: &[usize],
        targets: &[Vec<usize>],
        train: bool,
    ) -> Result<Tensor<T>> {
        let grid = self.enc.encode(tape, images, valid_widths, train)?;
        self.dec.teacher_forced_loss_batch(tape, &grid, targets)
    }

    /// Greedy-decode one image; also reports the annotation grid extent
    /// for attention overlays.
    pub fn recognize(
        &self,
        image: &Tensor<T>,
        valid_width: usize,
        vocab: &Vocabulary,
    ) -> Result<(String, Vec<AttentionRecord>, (usize, usize))> {
        let tape = Tape::inference();
        let grid = self.enc.encode(&tape, image, &[valid_width], false)?;
        let (text, records) = self.dec.decode_greedy(&grid, vocab)?;
        Ok((text, records, (grid.height, grid.width)))
    }
}
