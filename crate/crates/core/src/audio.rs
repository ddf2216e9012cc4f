//! Mono 16 kHz waveforms, 16-bit PCM WAV I/O and zero-extended slicing.

use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

const PCM_SCALE: f32 = 32768.0;

/// A mono waveform with nominal amplitude range [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|s| s.is_finite())
    }

    /// Checks the pipeline-internal invariants: 16 kHz and finite samples.
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedSampleRate(self.sample_rate));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(())
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannels(spec.channels));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedSampleRate(spec.sample_rate));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedBitDepth(format!(
            "{:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Waveform::new(samples))
}

/// Quantizes to 16-bit PCM. Samples outside the representable range are
/// clipped and counted in a log warning.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    w.validate()?;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    let mut clipped = 0usize;
    for &s in &w.samples {
        let (q, clip) = quantize(s);
        clipped += clip as usize;
        writer.write_sample(q)?;
    }
    writer.finalize()?;
    if clipped > 0 {
        log::warn!("{}: clipped {clipped} out-of-range samples", path.as_ref().display());
    }
    Ok(())
}

fn quantize(s: f32) -> (i16, bool) {
    let v = (s * PCM_SCALE).round();
    if v > i16::MAX as f32 {
        (i16::MAX, true)
    } else if v < i16::MIN as f32 {
        (i16::MIN, true)
    } else {
        (v as i16, false)
    }
}

/// Returns `len` samples starting at `start` of the signal zero-extended
/// infinitely in both directions.
pub fn slice_pad(w: &Waveform, start: i64, len: usize) -> Waveform {
    let mut out = vec![0.0f32; len];
    let n = w.samples.len() as i64;
    let lo = start.max(0);
    let hi = (start + len as i64).min(n);
    if lo < hi {
        let dst = (lo - start) as usize;
        out[dst..dst + (hi - lo) as usize].copy_from_slice(&w.samples[lo as usize..hi as usize]);
    }
    Waveform {
        samples: out,
        sample_rate: w.sample_rate,
    }
}
