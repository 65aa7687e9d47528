//! Attention-based encoder-decoder recognizer for handwritten text.
//!
//! Online ink is rasterized to binary images, a DenseNet encoder turns
//! them into a grid of annotation vectors, and an attention LSTM decoder
//! emits characters until the end symbol. Training, CER/WER evaluation
//! and attention visualization are included; everything runs on a minimal
//! tape-based autodiff core that is generic over the scalar type.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod ink;
pub mod metrics;
pub mod model;
pub mod pgm;
pub mod tensor;
pub mod train;
pub mod util;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Tensor32, Tensor64};
