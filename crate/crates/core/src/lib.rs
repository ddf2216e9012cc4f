//! Codec-latent voice conversion: encode a source waveform with a neural
//! codec, transform the latents in one forward pass conditioned on a
//! reference mel sequence and speaker embedding, and decode. Includes
//! chunkwise streaming inference with latency accounting, training-data
//! construction and the retained loss terms.

pub mod audio;
pub mod codec;
pub mod converter;
pub mod dataprep;
pub mod error;
pub mod features;
pub mod linalg;
pub mod pipeline;
pub mod streaming;
pub mod trainer;

pub use audio::{read_wav, slice_pad, write_wav, Waveform, SAMPLE_RATE};
pub use codec::{Codec, CodecLatent, ToyCodec, CODEC_HOP, LATENT_DIM};
pub use converter::{
    init_params, load_params, load_params_with_config, save_params, Converter, ConverterConfig, ConverterParams,
    IdentityConverter, LatentConverter,
};
pub use error::{Error, Result};
pub use features::{mel_spectrogram, speaker_embedding, MelSpectrogram, SpeakerEmbedding, SpeakerEncoder};
pub use streaming::{compute_t_model, crossfade, stream_run, LatencyReport, StreamConfig};
