//! Chunkwise streaming inference.
//!
//! Each step k converts a fixed window laid out as
//! `history | current | overlap | future`, starting at sample `k·C − H` of
//! the source (zero-padded before 0 and past the end). Only the current
//! region is emitted. Its first `O` samples are cosine cross-faded with the
//! overlap region kept from step k−1, which covers the same input span.
//!
//! Reference conditions are computed once before the first step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio::{slice_pad, Waveform, SAMPLE_RATE};
use crate::codec::Codec;
use crate::converter::LatentConverter;
use crate::error::{Error, Result};
use crate::features::{MelExtractor, MelSpectrogram, SpeakerEmbedding, SpeakerEncoder};

const SAMPLES_PER_MS: usize = SAMPLE_RATE as usize / 1000;

/// Window geometry in milliseconds. History is whatever remains of the
/// window after the current, overlap and future regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub window_ms: u32,
    pub current_ms: u32,
    pub overlap_ms: u32,
    pub future_ms: u32,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            window_ms: 2400,
            current_ms: 120,
            overlap_ms: 20,
            future_ms: 100,
        }
    }
}

/// Region lengths in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamGeometry {
    pub window: usize,
    pub history: usize,
    pub current: usize,
    pub overlap: usize,
    pub future: usize,
}

impl StreamConfig {
    pub fn history_ms(&self) -> Option<u32> {
        self.window_ms
            .checked_sub(self.current_ms)?
            .checked_sub(self.overlap_ms)?
            .checked_sub(self.future_ms)
    }

    /// Validates the layout against a codec hop and returns it in samples.
    pub fn geometry(&self, hop: usize) -> Result<StreamGeometry> {
        if self.current_ms == 0 {
            return Err(Error::InvalidConfig("current region must be non-empty".into()));
        }
        let history_ms = self.history_ms().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "window {} ms is shorter than current+overlap+future = {} ms",
                self.window_ms,
                self.current_ms as u64 + self.overlap_ms as u64 + self.future_ms as u64
            ))
        })?;
        if self.overlap_ms > self.current_ms {
            return Err(Error::InvalidConfig("overlap cannot exceed the current region".into()));
        }
        let ms = |v: u32| v as usize * SAMPLES_PER_MS;
        let g = StreamGeometry {
            window: ms(self.window_ms),
            history: ms(history_ms),
            current: ms(self.current_ms),
            overlap: ms(self.overlap_ms),
            future: ms(self.future_ms),
        };
        if !g.window.is_multiple_of(hop) {
            return Err(Error::InvalidConfig(format!(
                "window of {} samples is not a multiple of the codec hop {hop}",
                g.window
            )));
        }
        Ok(g)
    }
}

impl StreamGeometry {
    /// Whether every window starts on a codec frame boundary of the source.
    /// The toy codec reconstructs perfectly at any offset, so this only
    /// matters for context-dependent codecs.
    pub fn hop_aligned(&self, hop: usize) -> bool {
        self.current.is_multiple_of(hop) && self.history.is_multiple_of(hop)
    }

    pub fn window_start(&self, step: usize) -> i64 {
        (step * self.current) as i64 - self.history as i64
    }

    /// Source samples that must be available before step `k` can run.
    pub fn required_input(&self, step: usize) -> usize {
        step * self.current + self.current + self.overlap + self.future
    }

    pub fn num_steps(&self, source_len: usize) -> usize {
        source_len.div_ceil(self.current)
    }
}

/// Model-induced latency: the input span that must arrive before a chunk
/// can be emitted. History is past audio and does not contribute.
pub fn compute_t_model(cfg: &StreamConfig) -> u32 {
    cfg.current_ms + cfg.overlap_ms + cfg.future_ms
}

/// Fade-in weight for sample `i` of `len`, sampled at half-integer points so
/// neither endpoint is exactly 0 or 1.
pub fn fade_in_weight(i: usize, len: usize) -> f64 {
    0.5 * (1.0 - (std::f64::consts::PI * (i as f64 + 0.5) / len as f64).cos())
}

pub fn crossfade(prev_tail: &[f32], new_head: &[f32]) -> Result<Vec<f32>> {
    if prev_tail.len() != new_head.len() {
        return Err(Error::LengthMismatch(prev_tail.len(), new_head.len()));
    }
    if prev_tail.is_empty() {
        return Err(Error::InvalidConfig("cross-fade length must be at least 1".into()));
    }
    let len = prev_tail.len();
    Ok(prev_tail
        .iter()
        .zip(new_head)
        .enumerate()
        .map(|(i, (&p, &n))| {
            let w_in = fade_in_weight(i, len);
            ((1.0 - w_in) * p as f64 + w_in * n as f64) as f32
        })
        .collect())
}

/// Reference conditions shared by every step of a stream.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub mel: MelSpectrogram,
    pub speaker: SpeakerEmbedding,
}

impl Conditioning {
    pub fn from_reference(reference: &Waveform, speaker_seed: u64) -> Result<Self> {
        let mel = MelExtractor::new().extract(reference)?;
        let speaker = SpeakerEncoder::new(speaker_seed).embed_mel(&mel);
        Ok(Self { mel, speaker })
    }
}

/// Wall-clock milliseconds spent in one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTimings {
    pub enc_ms: f64,
    pub convert_ms: f64,
    pub dec_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct StreamState {
    pub step: usize,
    /// Decoded overlap region of the previous step.
    pub retained_tail: Vec<f32>,
    pub cond: Conditioning,
    pub timings: Vec<StepTimings>,
}

impl StreamState {
    pub fn new(cond: Conditioning) -> Self {
        Self {
            step: 0,
            retained_tail: Vec::new(),
            cond,
            timings: Vec::new(),
        }
    }
}

/// Runs step `state.step` over the samples received so far and returns the
/// emitted chunk of `current` samples. Without `end_of_stream` the source
/// must already cover the step's current, overlap and future regions.
pub fn stream_step(
    state: &mut StreamState,
    geometry: &StreamGeometry,
    source: &Waveform,
    end_of_stream: bool,
    codec: &dyn Codec,
    converter: &dyn LatentConverter,
) -> Result<(Vec<f32>, StepTimings)> {
    let k = state.step;
    let need = geometry.required_input(k);
    if !end_of_stream && source.len() < need {
        return Err(Error::InsufficientInput {
            step: k,
            need,
            have: source.len(),
        });
    }
    let started = Instant::now();
    let window = slice_pad(source, geometry.window_start(k), geometry.window);

    let t = Instant::now();
    let z = codec.encode(&window)?;
    let enc_ms = ms_since(t);

    let t = Instant::now();
    let z_hat = converter.convert(&z, &state.cond.mel, &state.cond.speaker)?;
    let convert_ms = ms_since(t);

    let t = Instant::now();
    let y = codec.decode(&z_hat)?;
    let dec_ms = ms_since(t);
    if y.len() != geometry.window {
        return Err(Error::LengthMismatch(y.len(), geometry.window));
    }
    if !y.is_finite() {
        return Err(Error::NonFinite("decoded window"));
    }

    let cur = geometry.history..geometry.history + geometry.current;
    let mut chunk = y.samples[cur.clone()].to_vec();
    let o = geometry.overlap;
    if k > 0 && o > 0 {
        let faded = crossfade(&state.retained_tail, &chunk[..o])?;
        chunk[..o].copy_from_slice(&faded);
    }
    state.retained_tail = y.samples[cur.end..cur.end + o].to_vec();
    state.step += 1;

    let timings = StepTimings {
        enc_ms,
        convert_ms,
        dec_ms,
        total_ms: ms_since(started),
    };
    state.timings.push(timings);
    Ok((chunk, timings))
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Per-chunk compute statistics in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ComputeStats {
    pub mean: f64,
    pub p95: f64,
    pub enc: f64,
    pub convert: f64,
    pub dec: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub t_model_ms: f64,
    pub t_current_ms: f64,
    pub t_overlap_ms: f64,
    pub t_future_ms: f64,
    pub t_compute_ms: ComputeStats,
    pub t_latency_ms: f64,
    pub chunk_count: usize,
    pub rtf: f64,
}

impl LatencyReport {
    pub fn from_timings(cfg: &StreamConfig, timings: &[StepTimings], wall_s: f64, audio_s: f64) -> Self {
        let n = timings.len();
        let mean = |f: fn(&StepTimings) -> f64| {
            if n == 0 {
                0.0
            } else {
                timings.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let mut totals: Vec<f64> = timings.iter().map(|t| t.total_ms).collect();
        totals.sort_by(f64::total_cmp);
        // nearest-rank percentile
        let p95 = if n == 0 {
            0.0
        } else {
            totals[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1]
        };
        let compute = ComputeStats {
            mean: mean(|t| t.total_ms),
            p95,
            enc: mean(|t| t.enc_ms),
            convert: mean(|t| t.convert_ms),
            dec: mean(|t| t.dec_ms),
        };
        let t_model_ms = compute_t_model(cfg) as f64;
        Self {
            t_model_ms,
            t_current_ms: cfg.current_ms as f64,
            t_overlap_ms: cfg.overlap_ms as f64,
            t_future_ms: cfg.future_ms as f64,
            t_compute_ms: compute,
            t_latency_ms: t_model_ms + compute.mean,
            chunk_count: n,
            rtf: if audio_s > 0.0 { wall_s / audio_s } else { 0.0 },
        }
    }
}

/// Runs every step over `source`, continuing from `state`, and returns the
/// concatenated chunks trimmed to the source length.
pub fn run_steps(
    source: &Waveform,
    geometry: &StreamGeometry,
    state: &mut StreamState,
    codec: &dyn Codec,
    converter: &dyn LatentConverter,
) -> Result<Waveform> {
    let steps = geometry.num_steps(source.len());
    let mut out = Vec::with_capacity(steps * geometry.current);
    for _ in 0..steps {
        let available = geometry.required_input(state.step).min(source.len());
        let end_of_stream = available == source.len();
        let received = Waveform::new(source.samples[..available].to_vec());
        let (chunk, _) = stream_step(state, geometry, &received, end_of_stream, codec, converter)?;
        out.extend_from_slice(&chunk);
    }
    out.truncate(source.len());
    Ok(Waveform::new(out))
}

/// Streams `source` through the pipeline as if it arrived in real time:
/// step k only sees the samples that exist by the end of its future region.
/// Output is trimmed to the source length.
pub fn stream_run(
    source: &Waveform,
    cond: Conditioning,
    cfg: &StreamConfig,
    codec: &dyn Codec,
    converter: &dyn LatentConverter,
) -> Result<(Waveform, LatencyReport)> {
    source.validate()?;
    let geometry = cfg.geometry(codec.hop())?;
    if !geometry.hop_aligned(codec.hop()) {
        log::debug!("stream windows are not aligned to codec frames: {geometry:?}");
    }
    let started = Instant::now();
    let mut state = StreamState::new(cond);
    let out = run_steps(source, &geometry, &mut state, codec, converter)?;
    let wall_s = started.elapsed().as_secs_f64();
    let report = LatencyReport::from_timings(cfg, &state.timings, wall_s, source.duration_s());
    Ok((out, report))
}

/// Convenience wrapper computing the reference conditions first.
pub fn stream_run_with_reference(
    source: &Waveform,
    reference: &Waveform,
    speaker_seed: u64,
    cfg: &StreamConfig,
    codec: &dyn Codec,
    converter: &dyn LatentConverter,
) -> Result<(Waveform, LatencyReport)> {
    let cond = Conditioning::from_reference(reference, speaker_seed)?;
    stream_run(source, cond, cfg, codec, converter)
}
