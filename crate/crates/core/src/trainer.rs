//! Loss terms with analytic gradients w.r.t. their direct inputs, and
//! assembly of converter supervision from a training example.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::codec::{Codec, CodecLatent};
use crate::dataprep::TrainingExample;
use crate::error::{Error, Result};
use crate::features::{MelExtractor, MelSpectrogram, SpeakerEmbedding, SpeakerEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mel: f64,
    pub spk: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mel: 1.0, spk: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mel_recon: f64,
    pub spk_sim: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn new(mel_recon: f64, spk_sim: f64, weights: LossWeights) -> Self {
        Self {
            mel_recon,
            spk_sim,
            total: weights.mel * mel_recon + weights.spk * spk_sim,
            weights,
        }
    }
}

/// Mean absolute difference over all entries, with gradient `sign(p − t)/N`
/// w.r.t. `pred` (zero where the entries agree).
pub fn mel_l1(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mel {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len().max(1) as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    let grad = diff.mapv(|d| if d == 0.0 { 0.0 } else { d.signum() / n });
    Ok((loss, grad))
}

/// Mean squared error with gradient `2(p − t)/D` w.r.t. `pred`.
pub fn embedding_mse(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch(pred.len(), target.len()));
    }
    let d = pred.len().max(1) as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / d;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / d).collect();
    Ok((loss, grad))
}

fn mel_f64(m: &MelSpectrogram) -> Array2<f64> {
    m.frames.mapv(f64::from)
}

/// L1 log-mel reconstruction loss and its gradient w.r.t. the predicted mel.
pub fn mel_recon_loss(pred: &Waveform, target: &Waveform) -> Result<(f64, Array2<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch(pred.len(), target.len()));
    }
    let ex = MelExtractor::new();
    mel_l1(&mel_f64(&ex.extract(pred)?), &mel_f64(&ex.extract(target)?))
}

/// Speaker-embedding MSE and its gradient w.r.t. the predicted embedding.
pub fn speaker_sim_loss(pred: &Waveform, target: &Waveform, seed: u64) -> Result<(f64, Vec<f64>)> {
    let enc = SpeakerEncoder::new(seed);
    let e_p = enc.embed(pred)?;
    let e_t = enc.embed(target)?;
    embedding_mse(&e_p.as_f64(), &e_t.as_f64())
}

pub fn eval_losses(pred: &Waveform, target: &Waveform, seed: u64, weights: LossWeights) -> Result<LossBreakdown> {
    let (mel, _) = mel_recon_loss(pred, target)?;
    let (spk, _) = speaker_sim_loss(pred, target, seed)?;
    Ok(LossBreakdown::new(mel, spk, weights))
}

/// Converter inputs and targets for one example.
#[derive(Debug, Clone)]
pub struct Supervision {
    pub z_src: CodecLatent,
    pub cond_mel: MelSpectrogram,
    pub speaker: SpeakerEmbedding,
    pub z_tgt: CodecLatent,
    pub mel_tgt: MelSpectrogram,
}

pub fn assemble_supervision(example: &TrainingExample, codec: &dyn Codec, speaker_seed: u64) -> Result<Supervision> {
    let ex = MelExtractor::new();
    let cond_mel = ex.extract(&example.cond_wave)?;
    Ok(Supervision {
        z_src: codec.encode(&example.source_seg)?,
        speaker: SpeakerEncoder::new(speaker_seed).embed_mel(&cond_mel),
        cond_mel,
        z_tgt: codec.encode(&example.target_seg)?,
        mel_tgt: ex.extract(&example.target_seg)?,
    })
}
