//! Rendered datasets and batch assembly: manifest-driven loading,
//! ink→tensor conversion (ink = 1.0, background = 0.0), width-bucketed
//! batches right-padded to a width the encoder can downsample.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ink::{parse_ink, render, RasterImage};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub label: String,
    pub image: RasterImage,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub height: usize,
    pub stroke_width: usize,
    pub max_width: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            height: 32,
            stroke_width: 2,
            max_width: 1024,
        }
    }
}

impl Dataset {
    /// Load a directory written by the generator: `manifest.tsv` rows of
    /// `filename<TAB>label`, each naming an INKTEXT file to render.
    pub fn from_dir(dir: &Path, rs: RenderSettings) -> Result<Self> {
        let manifest = dir.join("manifest.tsv");
        let text = fs::read_to_string(&manifest)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", manifest.display()))))?;
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let Some((file, label)) = line.split_once('\t') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("manifest row without tab: {line:?}"),
                });
            };
            let ink_text = fs::read_to_string(dir.join(file))?;
            let sample = parse_ink(&ink_text)?;
            let image = render(&sample, rs.height, rs.stroke_width, rs.max_width)?;
            samples.push(Sample {
                name: file.to_string(),
                label: label.to_string(),
                image,
            });
        }
        if samples.is_empty() {
            return Err(Error::Usage(format!(
                "no samples in {}",
                manifest.display()
            )));
        }
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One training batch: images [N×1×H×W_pad], per-sample valid widths,
/// encoded targets, and the reference labels.
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub valid_widths: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
    pub labels: Vec<String>,
}

/// Convert one raster to [1×1×H×W_pad] with ink = 1.0. `pad_width` must
/// be ≥ the image width and divisible by the encoder's downsampling.
pub fn image_to_tensor<T: Scalar>(img: &RasterImage, pad_width: usize) -> Result<Tensor<T>> {
    if pad_width < img.width {
        return Err(Error::Dim(format!(
            "pad width {pad_width} below image width {}",
            img.width
        )));
    }
    let mut data = vec![T::zero(); img.height * pad_width];
    for y in 0..img.height {
        for x in 0..img.width {
            data[y * pad_width + x] = T::from_f64((255 - img.pixels[y * img.width + x]) as f64 / 255.0);
        }
    }
    Tensor::from_vec(&[1, 1, img.height, pad_width], data)
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Assemble samples of equal height into one padded batch.
pub fn assemble_batch<T: Scalar>(
    samples: &[&Sample],
    vocab: &Vocabulary,
    downsample: usize,
) -> Result<Batch<T>> {
    if samples.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let h = samples[0].image.height;
    if samples.iter().any(|s| s.image.height != h) {
        return Err(Error::Dim("batch mixes image heights".into()));
    }
    if h % downsample != 0 {
        return Err(Error::Config(format!(
            "render height {h} not divisible by {downsample}"
        )));
    }
    let wmax = samples.iter().map(|s| s.image.width).max().unwrap();
    let wpad = round_up(wmax, downsample);
    let n = samples.len();
    let mut data = vec![T::zero(); n * h * wpad];
    let mut valid_widths = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (q, s) in samples.iter().enumerate() {
        let img = &s.image;
        for y in 0..h {
            for x in 0..img.width {
                data[(q * h + y) * wpad + x] =
                    T::from_f64((255 - img.pixels[y * img.width + x]) as f64 / 255.0);
            }
        }
        valid_widths.push(img.width);
        targets.push(vocab.encode_label(&s.label));
        labels.push(s.label.clone());
    }
    Ok(Batch {
        images: Tensor::from_vec(&[n, 1, h, wpad], data)?,
        valid_widths,
        targets,
        labels,
    })
}

/// Group sample indices into batches of at most `batch_size`, bucketed
/// by rendered width to limit padding. Deterministic for a given set.
pub fn bucket_batches(ds: &Dataset, batch_size: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.sort_by_key(|&i| (ds.samples[i].image.width, i));
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
