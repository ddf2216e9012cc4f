//! Codec encoder/decoder interface and a framewise, perfectly invertible toy
//! codec that stands in for a pretrained neural codec.

use ndarray::{s, Array2, ArrayView2};

use crate::audio::Waveform;
use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 1024;
pub const CODEC_HOP: usize = 256;

/// T×1024 latent frames at 62.5 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecLatent {
    pub frames: Array2<f32>,
}

impl CodecLatent {
    pub fn zeros(num_frames: usize) -> Self {
        Self {
            frames: Array2::zeros((num_frames, LATENT_DIM)),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Waveform ↔ latent mapping with a fixed hop of samples per frame.
pub trait Codec: Send + Sync {
    fn hop(&self) -> usize;

    fn encode(&self, w: &Waveform) -> Result<CodecLatent>;

    fn decode(&self, z: &CodecLatent) -> Result<Waveform>;
}

/// Each 256-sample frame maps to its orthonormal DCT-II scaled by 1/16,
/// written into the first 256 latent columns; the remaining 768 are zero.
#[derive(Debug, Clone)]
pub struct ToyCodec {
    /// basis[[k, n]]: DCT-II function k at sample n
    basis: Array2<f64>,
}

pub const TOY_ENCODE_SCALE: f64 = 0.0625;

impl Default for ToyCodec {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyCodec {
    pub fn new() -> Self {
        let n = CODEC_HOP;
        let basis = Array2::from_shape_fn((n, n), |(k, i)| {
            let s = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            s * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos()
        });
        Self { basis }
    }
}

impl Codec for ToyCodec {
    fn hop(&self) -> usize {
        CODEC_HOP
    }

    fn encode(&self, w: &Waveform) -> Result<CodecLatent> {
        let n = CODEC_HOP;
        if !w.len().is_multiple_of(n) {
            return Err(Error::LengthNotMultipleOfHop { len: w.len(), hop: n });
        }
        let frames = ArrayView2::from_shape((w.len() / n, n), &w.samples).expect("whole frames");
        let coeffs = frames.mapv(f64::from).dot(&self.basis.t());
        let mut z = CodecLatent::zeros(frames.nrows());
        z.frames
            .slice_mut(s![.., ..n])
            .zip_mut_with(&coeffs, |o, &c| *o = (c * TOY_ENCODE_SCALE) as f32);
        Ok(z)
    }

    fn decode(&self, z: &CodecLatent) -> Result<Waveform> {
        if z.frames.ncols() != LATENT_DIM {
            return Err(Error::DimensionMismatch {
                what: "codec latent",
                expected: LATENT_DIM,
                got: z.frames.ncols(),
            });
        }
        let n = CODEC_HOP;
        let coeffs = z.frames.slice(s![.., ..n]).mapv(|c| c as f64 / TOY_ENCODE_SCALE);
        let out: Vec<f32> = coeffs.dot(&self.basis).iter().map(|&v| v as f32).collect();
        Ok(Waveform::new(out))
    }
}
