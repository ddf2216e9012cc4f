use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use latent_vc::dataprep::{sample_mode, synth_pair, RoleMode, RoleProbs};
use latent_vc::pipeline::{self, ConvertMode, ConvertRequest};
use latent_vc::trainer::{eval_losses, LossWeights};
use latent_vc::{read_wav, write_wav, Error, MelSpectrogram, Result, SpeakerEncoder, StreamConfig};

#[derive(Parser)]
#[command(
    name = "latent-vc",
    version,
    about = "Codec-latent voice conversion with streaming inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a whole utterance in one pass.
    Convert(ConvertArgs),
    /// Convert chunk by chunk and report latency.
    Stream(StreamArgs),
    /// Time repeated streaming runs.
    Bench(BenchArgs),
    /// Write the log-mel matrix and speaker embedding of a WAV file.
    Features(FeaturesArgs),
    /// Write a synthetic corpus of content-matched utterance pairs.
    MakePairs(MakePairsArgs),
    /// Print empirical role-mode frequencies.
    SampleRoles(SampleRolesArgs),
    /// Print the loss breakdown between a prediction and a target.
    EvalLoss(EvalLossArgs),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Converter checkpoint; seeded initial parameters when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bypass the converter (codec round trip only).
    #[arg(long)]
    passthrough: bool,
    /// Layer count of the seeded-init converter.
    #[arg(long)]
    n_layers: Option<usize>,
}

#[derive(Args)]
struct GeometryArgs {
    #[arg(long, default_value_t = 2400)]
    window_ms: u32,
    #[arg(long, default_value_t = 120)]
    current_ms: u32,
    #[arg(long, default_value_t = 20)]
    overlap_ms: u32,
    #[arg(long, default_value_t = 100)]
    future_ms: u32,
}

impl GeometryArgs {
    fn config(&self) -> StreamConfig {
        StreamConfig {
            window_ms: self.window_ms,
            current_ms: self.current_ms,
            overlap_ms: self.overlap_ms,
            future_ms: self.future_ms,
        }
    }
}

#[derive(Args)]
struct ConvertArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct StreamArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long)]
    output: PathBuf,
    /// Latency report JSON path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    source: PathBuf,
    /// Output prefix: writes `<prefix>.mel.f32`, `<prefix>.mel.json` and `<prefix>.spk.f32`.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MakePairsArgs {
    /// Corpus directory.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6.0)]
    duration_s: f64,
    /// Size of the speaker pool.
    #[arg(long, default_value_t = 8)]
    speakers: u64,
}

#[derive(Args)]
struct SampleRolesArgs {
    #[arg(long, default_value_t = 100_000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probabilities for standard, reconstruction and reversed modes.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.4, 0.2, 0.4])]
    probs: Vec<f64>,
}

#[derive(Args)]
struct EvalLossArgs {
    /// Predicted waveform.
    #[arg(long, visible_alias = "source")]
    pred: PathBuf,
    /// Target waveform.
    #[arg(long, visible_alias = "reference")]
    target: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    lambda_mel: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_spk: f64,
}

fn request(model: &ModelArgs, mode: ConvertMode, output: Option<&Path>, stream_cfg: StreamConfig) -> ConvertRequest {
    ConvertRequest {
        source_path: model.source.clone(),
        reference_path: model.reference.clone(),
        output_path: output.map(Path::to_path_buf),
        mode,
        stream_cfg,
        checkpoint_path: model.checkpoint.clone(),
        seed: model.seed,
        passthrough: model.passthrough,
        n_layers: model.n_layers,
    }
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize)]
struct PairEntry {
    real: String,
    generated: String,
    content_seed: u64,
    speaker_a: u64,
    speaker_b: u64,
}

#[derive(Serialize)]
struct RoleFrequencies {
    count: usize,
    standard: f64,
    reconstruction: f64,
    reversed: f64,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert(a) => {
            let req = request(&a.model, ConvertMode::Offline, Some(&a.output), StreamConfig::default());
            let (_, rtf) = pipeline::convert_offline(&req)?;
            println!("{{\"rtf\": {rtf}}}");
        }
        Command::Stream(a) => {
            let req = request(&a.model, ConvertMode::Streaming, Some(&a.output), a.geometry.config());
            let (_, report) = pipeline::convert_streaming(&req)?;
            write_json(a.report.as_deref(), &report)?;
        }
        Command::Bench(a) => {
            let req = request(
                &a.model,
                ConvertMode::Streaming,
                a.output.as_deref(),
                a.geometry.config(),
            );
            let (y, report) = pipeline::bench(&req, a.repeats)?;
            if let Some(out) = &a.output {
                write_wav(out, &y)?;
            }
            write_json(a.report.as_deref(), &report)?;
        }
        Command::Features(a) => {
            let w = read_wav(&a.source)?;
            let mel: MelSpectrogram = latent_vc::mel_spectrogram(&w)?;
            let spk = SpeakerEncoder::new(a.seed).embed_mel(&mel);
            let (rows, cols) = mel.frames.dim();
            write_f32(&with_suffix(&a.output, ".mel.f32"), mel.frames.iter().copied())?;
            write_json(
                Some(&with_suffix(&a.output, ".mel.json")),
                &serde_json::json!({ "rows": rows, "cols": cols }),
            )?;
            write_f32(&with_suffix(&a.output, ".spk.f32"), spk.vector.iter().copied())?;
        }
        Command::MakePairs(a) => {
            if a.speakers < 2 {
                return Err(Error::InvalidConfig("need at least two speakers".into()));
            }
            fs::create_dir_all(&a.output)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let mut manifest = Vec::with_capacity(a.count);
            for i in 0..a.count {
                let content_seed: u64 = rng.random();
                let speaker_a = rng.random_range(0..a.speakers);
                let speaker_b = (speaker_a + rng.random_range(1..a.speakers)) % a.speakers;
                let (real, generated) = synth_pair(content_seed, speaker_a, speaker_b, a.duration_s)?;
                let entry = PairEntry {
                    real: format!("pair_{i:04}_real.wav"),
                    generated: format!("pair_{i:04}_generated.wav"),
                    content_seed,
                    speaker_a,
                    speaker_b,
                };
                write_wav(a.output.join(&entry.real), &real)?;
                write_wav(a.output.join(&entry.generated), &generated)?;
                manifest.push(entry);
            }
            write_json(Some(&a.output.join("manifest.json")), &manifest)?;
        }
        Command::SampleRoles(a) => {
            let probs = RoleProbs::new(a.probs[0], a.probs[1], a.probs[2])?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let mut counts = [0usize; 3];
            for _ in 0..a.count {
                counts[sample_mode(&probs, &mut rng) as usize] += 1;
            }
            let freq = |m: RoleMode| counts[m as usize] as f64 / a.count.max(1) as f64;
            write_json(
                None,
                &RoleFrequencies {
                    count: a.count,
                    standard: freq(RoleMode::Standard),
                    reconstruction: freq(RoleMode::Reconstruction),
                    reversed: freq(RoleMode::Reversed),
                },
            )?;
        }
        Command::EvalLoss(a) => {
            let pred = read_wav(&a.pred)?;
            let target = read_wav(&a.target)?;
            let weights = LossWeights {
                mel: a.lambda_mel,
                spk: a.lambda_spk,
            };
            write_json(None, &eval_losses(&pred, &target, a.seed, weights)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // clap exits with 2 on usage errors and 0 for --help/--version
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
