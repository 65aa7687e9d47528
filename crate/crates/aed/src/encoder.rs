//! DenseNet feature extractor: initial 3×3 conv + max pool, dense blocks
//! of bottlenecked BN→ReLU→conv layers with channel concatenation, and
//! compressing transition layers (1×1 conv + average pool) in between.
//! The final feature map is flattened row-major into a grid of annotation
//! vectors for the attention decoder.

use crate::error::{Error, Result};
use crate::tensor::nn::{avgpool2d, batchnorm2d, conv2d, maxpool2d};
use crate::tensor::ops::{concat, nchw_to_nlc, relu};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::util::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub init_channels: usize,
    pub growth_rate: usize,
    pub block_depth: usize,
    pub n_blocks: usize,
    pub compression: f64,
}

impl EncoderConfig {
    /// Full-scale configuration: 48 initial maps, k=96, D=4, 3 blocks,
    /// half compression. Produces 684 annotation channels.
    pub fn full() -> Self {
        EncoderConfig {
            init_channels: 48,
            growth_rate: 96,
            block_depth: 4,
            n_blocks: 3,
            compression: 0.5,
        }
    }

    /// Desk-scale configuration that overfits small corpora in minutes.
    pub fn desk() -> Self {
        EncoderConfig {
            init_channels: 24,
            growth_rate: 24,
            block_depth: 4,
            n_blocks: 3,
            compression: 0.5,
        }
    }

    /// Tiny configuration for gradient checks.
    pub fn toy() -> Self {
        EncoderConfig {
            init_channels: 6,
            growth_rate: 4,
            block_depth: 2,
            n_blocks: 3,
            compression: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.init_channels == 0
            || self.growth_rate == 0
            || self.block_depth == 0
            || self.n_blocks == 0
        {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!(
                "compression {} outside (0,1]",
                self.compression
            )));
        }
        Ok(())
    }

    /// Bottleneck width of the 1×1 conv inside each dense layer.
    pub fn bottleneck_width(&self) -> usize {
        4 * self.growth_rate
    }

    /// Channel counts entering/leaving each stage:
    /// init, block1 out, transition1 out, block2 out, ... final.
    pub fn channel_trace(&self) -> Vec<usize> {
        let mut trace = vec![self.init_channels];
        let mut c = self.init_channels;
        for b in 0..self.n_blocks {
            c += self.block_depth * self.growth_rate;
            trace.push(c);
            if b + 1 < self.n_blocks {
                c = (self.compression * c as f64).floor() as usize;
                trace.push(c);
            }
        }
        trace
    }

    pub fn out_channels(&self) -> usize {
        *self.channel_trace().last().expect("non-empty trace")
    }

    /// Total spatial downsampling factor (initial pool plus transitions).
    pub fn downsample_factor(&self) -> usize {
        1 << self.n_blocks
    }
}

/// Batch-norm parameter set for one normalization site.
pub struct BnParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BnParams<T> {
    fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::param(&[channels], vec![T::one(); channels]).expect("shape"),
            beta: Tensor::param(&[channels], vec![T::zero(); channels]).expect("shape"),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(&[channels], vec![T::one(); channels]).expect("shape"),
        }
    }

    fn apply(&self, tape: &Tape, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        batchnorm2d(
            tape,
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            train,
        )
    }
}

/// Glorot-uniform weights in ±sqrt(6/(fan_in+fan_out)).
pub fn init_weights<T: Scalar>(
    rng: &mut SplitMix64,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.uniform(-bound, bound)))
        .collect();
    Tensor::param(shape, data).expect("consistent shape")
}

struct ConvLayer<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn new(rng: &mut SplitMix64, c_out: usize, c_in: usize, k: usize) -> Self {
        let fan_in = c_in * k * k;
        let fan_out = c_out * k * k;
        ConvLayer {
            weight: init_weights(rng, &[c_out, c_in, k, k], fan_in, fan_out),
            bias: Tensor::param(&[c_out], vec![T::zero(); c_out]).expect("shape"),
        }
    }
}

/// One dense layer: BN→ReLU→conv1×1 bottleneck, BN→ReLU→conv3×3.
struct DenseLayer<T> {
    bn1: BnParams<T>,
    conv1: ConvLayer<T>,
    bn2: BnParams<T>,
    conv3: ConvLayer<T>,
}

struct Transition<T> {
    conv: ConvLayer<T>,
}

pub struct DenseNetEncoder<T> {
    pub cfg: EncoderConfig,
    init_conv: ConvLayer<T>,
    blocks: Vec<Vec<DenseLayer<T>>>,
    transitions: Vec<Transition<T>>,
}

/// Encoder output: N samples of an H×W grid of C-dimensional annotation
/// vectors, flattened row-major to L = H·W, with a padding mask.
pub struct AnnotationGrid<T> {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// [N × L × C]
    pub vectors: Tensor<T>,
    /// len N·L; true marks positions arising purely from batch padding
    pub mask: Vec<bool>,
}

impl<T> AnnotationGrid<T> {
    pub fn seq_len(&self) -> usize {
        self.height * self.width
    }
}

impl<T: Scalar> DenseNetEncoder<T> {
    pub fn new(cfg: EncoderConfig, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let init_conv = ConvLayer::new(rng, cfg.init_channels, 1, 3);
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        let mut transitions = Vec::new();
        let mut c = cfg.init_channels;
        let bottleneck = cfg.bottleneck_width();
        for b in 0..cfg.n_blocks {
            let mut layers = Vec::with_capacity(cfg.block_depth);
            for _ in 0..cfg.block_depth {
                layers.push(DenseLayer {
                    bn1: BnParams::new(c),
                    conv1: ConvLayer::new(rng, bottleneck, c, 1),
                    bn2: BnParams::new(bottleneck),
                    conv3: ConvLayer::new(rng, cfg.growth_rate, bottleneck, 3),
                });
                c += cfg.growth_rate;
            }
            blocks.push(layers);
            if b + 1 < cfg.n_blocks {
                let c_out = (cfg.compression * c as f64).floor() as usize;
                transitions.push(Transition {
                    conv: ConvLayer::new(rng, c_out, c, 1),
                });
                c = c_out;
            }
        }
        Ok(DenseNetEncoder {
            cfg,
            init_conv,
            blocks,
            transitions,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.out_channels()
    }

    /// Forward pass to the final feature map [N×C×H/8×W/8].
    pub fn forward(&self, tape: &Tape, images: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let sh = images.shape();
        if sh.len() != 4 || sh[1] != 1 {
            return Err(Error::Dim(format!(
                "encoder wants [N×1×H×W] images, got {sh:?}"
            )));
        }
        let ds = self.cfg.downsample_factor();
        if sh[2] % ds != 0 || sh[3] % ds != 0 {
            return Err(Error::Config(format!(
                "image extents {}x{} not divisible by {ds}",
                sh[2], sh[3]
            )));
        }
        let x = conv2d(tape, images, &self.init_conv.weight, Some(&self.init_conv.bias), 1, 1)?;
        let mut x = maxpool2d(tape, &x)?;
        for (b, layers) in self.blocks.iter().enumerate() {
            let mut features = vec![x];
            for layer in layers {
                let input = if features.len() == 1 {
                    features[0].clone()
                } else {
                    let refs: Vec<&Tensor<T>> = features.iter().collect();
                    concat(tape, &refs, 1)?
                };
                let h = layer.bn1.apply(tape, &input, train)?;
                let h = relu(tape, &h);
                let h = conv2d(tape, &h, &layer.conv1.weight, Some(&layer.conv1.bias), 1, 0)?;
                let h = layer.bn2.apply(tape, &h, train)?;
                let h = relu(tape, &h);
                let h = conv2d(tape, &h, &layer.conv3.weight, Some(&layer.conv3.bias), 1, 1)?;
                features.push(h);
            }
            let refs: Vec<&Tensor<T>> = features.iter().collect();
            x = concat(tape, &refs, 1)?;
            if b + 1 < self.blocks.len() {
                let t = &self.transitions[b];
                let h = conv2d(tape, &x, &t.conv.weight, Some(&t.conv.bias), 1, 0)?;
                x = avgpool2d(tape, &h)?;
            }
        }
        Ok(x)
    }

    /// Full encode: forward plus row-major flattening and the padding
    /// mask derived from per-sample valid input widths.
    pub fn encode(
        &self,
        tape: &Tape,
        images: &Tensor<T>,
        valid_widths: &[usize],
        train: bool,
    ) -> Result<AnnotationGrid<T>> {
        let n = images.shape()[0];
        if valid_widths.len() != n {
            return Err(Error::Dim(format!(
                "{} valid widths for batch of {n}",
                valid_widths.len()
            )));
        }
        let featuremap = self.forward(tape, images, train)?;
        flatten_annotations(tape, &featuremap, valid_widths, self.cfg.downsample_factor())
    }

    /// Parameter tensors in a stable order, running BN stats included.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = vec![
            ("enc.init.conv.w".into(), self.init_conv.weight.clone()),
            ("enc.init.conv.b".into(), self.init_conv.bias.clone()),
        ];
        let push_bn = |out: &mut Vec<(String, Tensor<T>)>, prefix: String, bn: &BnParams<T>| {
            out.push((format!("{prefix}.gamma"), bn.gamma.clone()));
            out.push((format!("{prefix}.beta"), bn.beta.clone()));
            out.push((format!("{prefix}.mean"), bn.running_mean.clone()));
            out.push((format!("{prefix}.var"), bn.running_var.clone()));
        };
        for (b, layers) in self.blocks.iter().enumerate() {
            for (l, layer) in layers.iter().enumerate() {
                let p = format!("enc.block{}.layer{}", b + 1, l);
                push_bn(&mut out, format!("{p}.bn1"), &layer.bn1);
                out.push((format!("{p}.conv1.w"), layer.conv1.weight.clone()));
                out.push((format!("{p}.conv1.b"), layer.conv1.bias.clone()));
                push_bn(&mut out, format!("{p}.bn2"), &layer.bn2);
                out.push((format!("{p}.conv3.w"), layer.conv3.weight.clone()));
                out.push((format!("{p}.conv3.b"), layer.conv3.bias.clone()));
            }
        }
        for (t, tr) in self.transitions.iter().enumerate() {
            let p = format!("enc.transition{}", t + 1);
            out.push((format!("{p}.conv.w"), tr.conv.weight.clone()));
            out.push((format!("{p}.conv.b"), tr.conv.bias.clone()));
        }
        out
    }
}

/// Flatten a feature map [N×C×H×W] row-major into [N×L×C]. A grid column
/// is masked iff all input columns contributing to it were padding.
pub fn flatten_annotations<T: Scalar>(
    tape: &Tape,
    featuremap: &Tensor<T>,
    valid_widths: &[usize],
    downsample: usize,
) -> Result<AnnotationGrid<T>> {
    let sh = featuremap.shape();
    if sh.len() != 4 {
        return Err(Error::Dim(format!("feature map must be 4-D, got {sh:?}")));
    }
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let vectors = nchw_to_nlc(tape, featuremap)?;
    let l = h * w;
    let mut mask = vec![false; n * l];
    for (q, &vw) in valid_widths.iter().enumerate() {
        for gw in 0..w {
            if gw * downsample >= vw {
                for gh in 0..h {
                    mask[q * l + gh * w + gw] = true;
                }
            }
        }
    }
    Ok(AnnotationGrid {
        batch: n,
        height: h,
        width: w,
        channels: c,
        vectors,
        mask,
    })
}
