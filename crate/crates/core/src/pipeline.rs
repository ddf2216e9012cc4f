//! End-to-end operations behind the command-line tool: offline and
//! streaming conversion, benchmarking.

use std::path::PathBuf;
use std::time::Instant;

use crate::audio::{read_wav, write_wav, Waveform};
use crate::codec::{Codec, ToyCodec};
use crate::converter::{load_params, Converter, ConverterConfig, IdentityConverter, LatentConverter};
use crate::error::{Error, Result};
use crate::streaming::{run_steps, stream_run, Conditioning, LatencyReport, StepTimings, StreamConfig, StreamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvertMode {
    Offline,
    Streaming,
}

#[derive(Debug, Clone)]
pub struct ConvertRequest {
    pub source_path: PathBuf,
    pub reference_path: PathBuf,
    pub output_path: Option<PathBuf>,
    pub mode: ConvertMode,
    pub stream_cfg: StreamConfig,
    /// Seeded-init parameters when absent.
    pub checkpoint_path: Option<PathBuf>,
    pub seed: u64,
    /// Skip the converter entirely (codec round trip only).
    pub passthrough: bool,
    /// Overrides the number of layers of a seeded-init converter.
    pub n_layers: Option<usize>,
}

impl ConvertRequest {
    pub fn new(source_path: impl Into<PathBuf>, reference_path: impl Into<PathBuf>, mode: ConvertMode) -> Self {
        Self {
            source_path: source_path.into(),
            reference_path: reference_path.into(),
            output_path: None,
            mode,
            stream_cfg: StreamConfig::default(),
            checkpoint_path: None,
            seed: 0,
            passthrough: false,
            n_layers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(out) = &self.output_path {
            if out == &self.source_path || out == &self.reference_path {
                return Err(Error::InvalidConfig(format!(
                    "output {} would overwrite an input",
                    out.display()
                )));
            }
        }
        if self.passthrough && (self.checkpoint_path.is_some() || self.n_layers.is_some()) {
            return Err(Error::InvalidConfig(
                "passthrough cannot be combined with a checkpoint or layer override".into(),
            ));
        }
        if self.checkpoint_path.is_some() && self.n_layers.is_some() {
            return Err(Error::InvalidConfig("the layer count of a checkpoint is fixed".into()));
        }
        if self.n_layers == Some(0) {
            return Err(Error::InvalidConfig("n_layers must be at least 1".into()));
        }
        self.stream_cfg.geometry(ToyCodec::new().hop())?;
        Ok(())
    }

    pub fn build_converter(&self) -> Result<Box<dyn LatentConverter>> {
        if self.passthrough {
            return Ok(Box::new(IdentityConverter));
        }
        if let Some(path) = &self.checkpoint_path {
            let (cfg, params) = load_params(path)?;
            return Ok(Box::new(Converter::new(cfg, params)?));
        }
        let mut cfg = ConverterConfig::default();
        if let Some(n) = self.n_layers {
            cfg.n_layers = n;
        }
        Ok(Box::new(Converter::init(cfg, self.seed)?))
    }
}

/// Single-pass conversion of a whole utterance. The source is zero-padded
/// to a hop multiple and the output trimmed back. Returns the output and
/// the real-time factor.
pub fn convert_waveform(
    source: &Waveform,
    cond: &Conditioning,
    codec: &dyn Codec,
    converter: &dyn LatentConverter,
) -> Result<(Waveform, f64)> {
    source.validate()?;
    if source.is_empty() {
        return Ok((Waveform::new(Vec::new()), 0.0));
    }
    let started = Instant::now();
    let hop = codec.hop();
    let mut padded = source.samples.clone();
    padded.resize(source.len().div_ceil(hop) * hop, 0.0);
    let z = codec.encode(&Waveform::new(padded))?;
    let z_hat = converter.convert(&z, &cond.mel, &cond.speaker)?;
    let mut y = codec.decode(&z_hat)?;
    if !y.is_finite() {
        return Err(Error::NonFinite("decoded output"));
    }
    y.samples.truncate(source.len());
    let rtf = started.elapsed().as_secs_f64() / source.duration_s();
    Ok((y, rtf))
}

struct Loaded {
    source: Waveform,
    cond: Conditioning,
    converter: Box<dyn LatentConverter>,
}

fn load(req: &ConvertRequest) -> Result<Loaded> {
    req.validate()?;
    let source = read_wav(&req.source_path)?;
    let reference = read_wav(&req.reference_path)?;
    let cond = Conditioning::from_reference(&reference, req.seed)?;
    let converter = req.build_converter()?;
    Ok(Loaded {
        source,
        cond,
        converter,
    })
}

pub fn convert_offline(req: &ConvertRequest) -> Result<(Waveform, f64)> {
    let l = load(req)?;
    let (y, rtf) = convert_waveform(&l.source, &l.cond, &ToyCodec::new(), l.converter.as_ref())?;
    if let Some(out) = &req.output_path {
        write_wav(out, &y)?;
    }
    Ok((y, rtf))
}

pub fn convert_streaming(req: &ConvertRequest) -> Result<(Waveform, LatencyReport)> {
    let l = load(req)?;
    let (y, report) = stream_run(
        &l.source,
        l.cond,
        &req.stream_cfg,
        &ToyCodec::new(),
        l.converter.as_ref(),
    )?;
    if let Some(out) = &req.output_path {
        write_wav(out, &y)?;
    }
    Ok((y, report))
}

/// Streams the source `repeats` times after one warm-up run and aggregates
/// per-chunk timings over all timed runs.
pub fn bench_waveform(
    source: &Waveform,
    cond: &Conditioning,
    cfg: &StreamConfig,
    codec: &dyn Codec,
    converter: &dyn LatentConverter,
    repeats: usize,
) -> Result<(Waveform, LatencyReport)> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    let geometry = cfg.geometry(codec.hop())?;
    let (mut output, _) = stream_run(source, cond.clone(), cfg, codec, converter)?;
    let mut timings: Vec<StepTimings> = Vec::new();
    let mut wall_s = 0.0;
    for _ in 0..repeats {
        let started = Instant::now();
        let mut state = StreamState::new(cond.clone());
        output = run_steps(source, &geometry, &mut state, codec, converter)?;
        wall_s += started.elapsed().as_secs_f64();
        timings.extend(state.timings);
    }
    let report = LatencyReport::from_timings(cfg, &timings, wall_s / repeats as f64, source.duration_s());
    Ok((output, report))
}

pub fn bench(req: &ConvertRequest, repeats: usize) -> Result<(Waveform, LatencyReport)> {
    let l = load(req)?;
    bench_waveform(
        &l.source,
        &l.cond,
        &req.stream_cfg,
        &ToyCodec::new(),
        l.converter.as_ref(),
        repeats,
    )
}

/// Process exit code for an error: 2 invalid arguments, 3 input format,
/// 4 non-finite numerics.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) => 4,
        Error::InvalidConfig(_) => 2,
        _ => 3,
    }
}
