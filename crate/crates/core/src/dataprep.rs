//! Training-data construction: synthetic content-matched utterance pairs,
//! role assignment and segment/condition cropping.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::codec::CODEC_HOP;
use crate::error::{Error, Result};

/// 2.4 s at 16 kHz.
pub const SEGMENT_LEN: usize = 38400;
/// Shortest target utterance that still leaves a condition after excision.
pub const MIN_TARGET_LEN: usize = 2 * SEGMENT_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoleMode {
    Standard,
    Reconstruction,
    Reversed,
}

impl RoleMode {
    pub const ALL: [RoleMode; 3] = [RoleMode::Standard, RoleMode::Reconstruction, RoleMode::Reversed];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoleProbs {
    pub p_std: f64,
    pub p_recon: f64,
    pub p_rev: f64,
}

impl Default for RoleProbs {
    fn default() -> Self {
        Self {
            p_std: 0.4,
            p_recon: 0.2,
            p_rev: 0.4,
        }
    }
}

impl RoleProbs {
    pub fn new(p_std: f64, p_recon: f64, p_rev: f64) -> Result<Self> {
        let p = Self { p_std, p_recon, p_rev };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_std, self.p_recon, self.p_rev];
        if ps.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "role probabilities must be non-negative: {ps:?}"
            )));
        }
        let sum: f64 = ps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("role probabilities sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Inverse-CDF draw in the order Standard, Reconstruction, Reversed.
pub fn sample_mode<R: Rng + ?Sized>(probs: &RoleProbs, rng: &mut R) -> RoleMode {
    let u: f64 = rng.random();
    if u < probs.p_std {
        RoleMode::Standard
    } else if u < probs.p_std + probs.p_recon {
        RoleMode::Reconstruction
    } else if probs.p_rev > 0.0 {
        RoleMode::Reversed
    } else if probs.p_recon > 0.0 {
        // only reachable through rounding in the cumulative sum
        RoleMode::Reconstruction
    } else {
        RoleMode::Standard
    }
}

/// A real utterance and a generated one with the same content spoken by a
/// different speaker. Both are sample-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct UtterancePair {
    pub real: Waveform,
    pub generated: Waveform,
}

impl UtterancePair {
    pub fn new(real: Waveform, generated: Waveform) -> Result<Self> {
        if real.len() != generated.len() {
            return Err(Error::LengthMismatch(real.len(), generated.len()));
        }
        Ok(Self { real, generated })
    }
}

/// Returns `(source, target)` borrowed from the pair.
pub fn assign_roles(pair: &UtterancePair, mode: RoleMode) -> (&Waveform, &Waveform) {
    match mode {
        RoleMode::Standard => (&pair.generated, &pair.real),
        RoleMode::Reconstruction => (&pair.real, &pair.real),
        RoleMode::Reversed => (&pair.real, &pair.generated),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub source_seg: Waveform,
    pub target_seg: Waveform,
    /// Target utterance with `target_seg` cut out.
    pub cond_wave: Waveform,
    pub mode: RoleMode,
    pub segment_start: usize,
}

/// Crops a hop-aligned 2.4 s segment at the same position from source and
/// target and removes it from the target to form the condition.
pub fn make_example<R: Rng + ?Sized>(
    source_utt: &Waveform,
    target_utt: &Waveform,
    mode: RoleMode,
    rng: &mut R,
) -> Result<TrainingExample> {
    if target_utt.len() < MIN_TARGET_LEN {
        return Err(Error::UtteranceTooShort {
            need: MIN_TARGET_LEN,
            got: target_utt.len(),
        });
    }
    if source_utt.len() < SEGMENT_LEN {
        return Err(Error::UtteranceTooShort {
            need: SEGMENT_LEN,
            got: source_utt.len(),
        });
    }
    let max_start = target_utt.len().min(source_utt.len()) - SEGMENT_LEN;
    let start = rng.random_range(0..=max_start / CODEC_HOP) * CODEC_HOP;
    example_at(source_utt, target_utt, mode, start)
}

/// `make_example` with a fixed segment start.
pub fn example_at(
    source_utt: &Waveform,
    target_utt: &Waveform,
    mode: RoleMode,
    start: usize,
) -> Result<TrainingExample> {
    let end = start + SEGMENT_LEN;
    if end > target_utt.len() || end > source_utt.len() {
        return Err(Error::UtteranceTooShort {
            need: end,
            got: target_utt.len().min(source_utt.len()),
        });
    }
    let t = &target_utt.samples;
    let mut cond = Vec::with_capacity(t.len() - SEGMENT_LEN);
    cond.extend_from_slice(&t[..start]);
    cond.extend_from_slice(&t[end..]);
    Ok(TrainingExample {
        source_seg: Waveform::new(source_utt.samples[start..end].to_vec()),
        target_seg: Waveform::new(t[start..end].to_vec()),
        cond_wave: Waveform::new(cond),
        mode,
        segment_start: start,
    })
}

/// Reinserts a segment at `start`; the inverse of the excision.
pub fn splice(cond_wave: &Waveform, segment: &Waveform, start: usize) -> Result<Waveform> {
    if start > cond_wave.len() {
        return Err(Error::LengthMismatch(start, cond_wave.len()));
    }
    let mut out = Vec::with_capacity(cond_wave.len() + segment.len());
    out.extend_from_slice(&cond_wave.samples[..start]);
    out.extend_from_slice(&segment.samples);
    out.extend_from_slice(&cond_wave.samples[start..]);
    Ok(Waveform::new(out))
}

const SPEAKER_BAND_EDGES_HZ: [f64; 3] = [500.0, 1500.0, 3500.0];
const SPEAKER_SALT: u64 = 0x5eed_5bea_cafe_0001;
const CONTENT_PEAK: f64 = 0.25;
const NOISE_BED: f64 = 0.15;

/// Per-speaker linear filter: four band gains and a constant tilt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerTransform {
    pub band_gain_db: [f64; 4],
    /// dB per octave relative to 1 kHz.
    pub tilt_db_per_octave: f64,
}

impl SpeakerTransform {
    pub fn for_speaker(id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(id ^ SPEAKER_SALT);
        let mut band_gain_db = [0.0; 4];
        for g in band_gain_db.iter_mut() {
            *g = rng.random_range(-18.0..6.0);
        }
        Self {
            band_gain_db,
            tilt_db_per_octave: rng.random_range(-4.0..4.0),
        }
    }

    pub fn gain(&self, freq_hz: f64) -> f64 {
        let band = SPEAKER_BAND_EDGES_HZ.iter().take_while(|&&e| freq_hz >= e).count();
        let octaves = (freq_hz.max(20.0) / 1000.0).log2();
        let db = self.band_gain_db[band] + self.tilt_db_per_octave * octaves;
        10f64.powf(db / 20.0)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let mut planner = FftPlanner::<f64>::new();
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        planner.plan_fft_forward(n).process(&mut buf);
        for (k, c) in buf.iter_mut().enumerate() {
            // mirror so the spectrum stays Hermitian
            let bin = k.min(n - k);
            *c *= self.gain(bin as f64 * SAMPLE_RATE as f64 / n as f64);
        }
        planner.plan_fft_inverse(n).process(&mut buf);
        buf.iter().map(|c| c.re / n as f64).collect()
    }
}

/// Seeded "content": a few harmonic tones with slow vibrato, each
/// band-limited below Nyquist, over a faint noise bed, under a slowly
/// varying amplitude envelope.
pub fn synth_content(content_seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(content_seed);
    let sr = SAMPLE_RATE as f64;
    let n_tones = rng.random_range(2..=4);
    let mut x: Vec<f64> = (0..len).map(|_| NOISE_BED * rng.random_range(-1.0..1.0)).collect();
    let mut phase = vec![0.0f64; len];
    for _ in 0..n_tones {
        let f0: f64 = rng.random_range(90.0..320.0);
        let amp: f64 = rng.random_range(0.3..1.0);
        let depth: f64 = rng.random_range(0.02..0.06);
        let rate: f64 = rng.random_range(3.0..7.0);
        let start: f64 = rng.random_range(0.0..2.0 * PI);
        let mut acc = start;
        for (i, p) in phase.iter_mut().enumerate() {
            *p = acc;
            let f = f0 * (1.0 + depth * (2.0 * PI * rate * i as f64 / sr).sin());
            acc += 2.0 * PI * f / sr;
        }
        let n_harm = ((sr / 2.0 - 200.0) / (f0 * (1.0 + depth))) as usize;
        for h in 1..=n_harm {
            let a = amp / h as f64;
            for (v, p) in x.iter_mut().zip(&phase) {
                *v += a * (h as f64 * p).sin();
            }
        }
    }
    // envelope in [0.2, 1]: a normalized sum of three slow raised sines
    let env_params: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..4.0),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.2..1.0),
            )
        })
        .collect();
    let norm: f64 = env_params.iter().map(|p| p.2).sum();
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let e: f64 = env_params
            .iter()
            .map(|&(f, ph, a)| a * 0.5 * (1.0 + (2.0 * PI * f * t + ph).sin()))
            .sum::<f64>()
            / norm;
        *v *= 0.2 + 0.8 * e;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in x.iter_mut() {
            *v *= CONTENT_PEAK / peak;
        }
    }
    x
}

/// Renders one content signal through two speaker transforms.
pub fn synth_pair(content_seed: u64, speaker_a: u64, speaker_b: u64, duration_s: f64) -> Result<(Waveform, Waveform)> {
    let len = (duration_s * SAMPLE_RATE as f64).round() as usize;
    if !duration_s.is_finite() || len < MIN_TARGET_LEN {
        return Err(Error::UtteranceTooShort {
            need: MIN_TARGET_LEN,
            got: len,
        });
    }
    let content = synth_content(content_seed, len);
    let render = |id: u64| {
        let y = SpeakerTransform::for_speaker(id).apply(&content);
        Waveform::new(y.into_iter().map(|v| v as f32).collect())
    };
    let a = render(speaker_a);
    let b = if speaker_b == speaker_a {
        a.clone()
    } else {
        render(speaker_b)
    };
    Ok((a, b))
}
