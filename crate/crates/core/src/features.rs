//! Reference-speech conditions: a 128-bin log-mel spectrogram aligned with
//! the codec frame rate, and a 192-dim speaker embedding.
//!
//! The speaker encoder is a deterministic stand-in for a learned one: mel
//! statistics pooling followed by a fixed random projection drawn from a
//! seeded PRNG, then L2 normalization.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const N_MELS: usize = 128;
pub const N_FFT: usize = 1024;
pub const WIN_LENGTH: usize = 1024;
pub const HOP_LENGTH: usize = 256;
pub const MEL_FMIN: f64 = 0.0;
pub const MEL_FMAX: f64 = 8000.0;
pub const LOG_FLOOR: f64 = 1e-5;
/// Frames per second of both the mel features and the codec latents.
pub const FRAME_RATE: f64 = SAMPLE_RATE as f64 / HOP_LENGTH as f64;

pub const SPEAKER_DIM: usize = 192;
const POOLED_DIM: usize = 2 * N_MELS;

/// T×128 natural-log mel energies at 62.5 frames per second.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f32>,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Number of mel frames produced for `len` samples (no center padding).
pub fn num_mel_frames(len: usize) -> usize {
    if len < WIN_LENGTH {
        0
    } else {
        (len - WIN_LENGTH) / HOP_LENGTH + 1
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// HTK-style triangular filters, shape (n_mels, n_fft/2 + 1), unnormalized.
pub fn mel_filterbank() -> Array2<f64> {
    let n_bins = N_FFT / 2 + 1;
    let mel_lo = hz_to_mel(MEL_FMIN);
    let mel_hi = hz_to_mel(MEL_FMAX);
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((N_MELS, n_bins));
    for m in 0..N_MELS {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
            let up = (f - lo) / (mid - lo);
            let down = (hi - f) / (hi - mid);
            fb[[m, k]] = up.min(down).max(0.0);
        }
    }
    fb
}

fn hann_window() -> Vec<f64> {
    (0..WIN_LENGTH)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WIN_LENGTH as f64).cos())
        .collect()
}

/// Reusable STFT plan and filterbank.
#[derive(Clone)]
pub struct MelExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: Array2<f64>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").finish_non_exhaustive()
    }
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MelExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        Self {
            fft,
            window: hann_window(),
            filterbank: mel_filterbank(),
        }
    }

    /// Power spectrogram |STFT|², shape (T, n_fft/2 + 1).
    pub fn power_spectrogram(&self, w: &Waveform) -> Result<Array2<f64>> {
        if w.len() < WIN_LENGTH {
            return Err(Error::InputTooShort {
                need: WIN_LENGTH,
                got: w.len(),
            });
        }
        let n_frames = num_mel_frames(w.len());
        let n_bins = N_FFT / 2 + 1;
        let mut power = Array2::zeros((n_frames, n_bins));
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for (t, mut row) in power.axis_iter_mut(Axis(0)).enumerate() {
            let frame = &w.samples[t * HOP_LENGTH..t * HOP_LENGTH + WIN_LENGTH];
            for (b, (&s, &win)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex::new(s as f64 * win, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in row.iter_mut().zip(&buf[..n_bins]) {
                *p = c.norm_sqr();
            }
        }
        Ok(power)
    }

    pub fn extract(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let power = self.power_spectrogram(w)?;
        let mel = power.dot(&self.filterbank.t());
        let frames = mel.mapv(|p| p.max(LOG_FLOOR).ln() as f32);
        Ok(MelSpectrogram { frames })
    }
}

pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    MelExtractor::new().extract(w)
}

/// Unit-norm 192-dim utterance-level speaker vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f32>,
}

impl SpeakerEmbedding {
    pub fn as_f64(&self) -> Vec<f64> {
        self.vector.iter().map(|&v| v as f64).collect()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        cosine_similarity(&self.as_f64(), &other.as_f64())
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Statistics-pooling speaker encoder with a seeded 192×256 projection.
#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    projection: Array2<f64>,
    mel: MelExtractor,
}

impl SpeakerEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (6.0 / (SPEAKER_DIM + POOLED_DIM) as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((SPEAKER_DIM, POOLED_DIM), || rng.random_range(-a..=a));
        Self {
            projection,
            mel: MelExtractor::new(),
        }
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    pub fn embed(&self, w: &Waveform) -> Result<SpeakerEmbedding> {
        let mel = self.mel.extract(w)?;
        Ok(self.embed_mel(&mel))
    }

    /// Pools per-bin mean and standard deviation over time, projects, and
    /// normalizes.
    pub fn embed_mel(&self, mel: &MelSpectrogram) -> SpeakerEmbedding {
        let pooled = pool_statistics(mel);
        let projected = self.projection.dot(&ndarray::Array1::from(pooled));
        let norm = projected.iter().map(|v| v * v).sum::<f64>().sqrt();
        let vector = if norm > 0.0 {
            projected.iter().map(|v| (v / norm) as f32).collect()
        } else {
            // unreachable for real mels (entries are bounded below by ln 1e-5)
            let mut v = vec![0.0; SPEAKER_DIM];
            v[0] = 1.0;
            v
        };
        SpeakerEmbedding { vector }
    }
}

/// [per-bin mean ; per-bin population std] over time.
pub fn pool_statistics(mel: &MelSpectrogram) -> Vec<f64> {
    let t = mel.num_frames().max(1) as f64;
    let mut mean = vec![0.0f64; N_MELS];
    let mut sq = vec![0.0f64; N_MELS];
    for row in mel.frames.rows() {
        for (b, &v) in row.iter().enumerate() {
            mean[b] += v as f64;
            sq[b] += (v as f64) * (v as f64);
        }
    }
    let mut out = Vec::with_capacity(POOLED_DIM);
    out.extend(mean.iter().map(|m| m / t));
    out.extend(
        mean.iter()
            .zip(&sq)
            .map(|(m, s)| (s / t - (m / t).powi(2)).max(0.0).sqrt()),
    );
    out
}

pub fn speaker_embedding(w: &Waveform, seed: u64) -> Result<SpeakerEmbedding> {
    SpeakerEncoder::new(seed).embed(w)
}
