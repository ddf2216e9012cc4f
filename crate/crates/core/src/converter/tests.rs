use super::*;
use rand::Rng;

fn tiny_cfg() -> ConverterConfig {
    ConverterConfig {
        d_latent: 12,
        d_cond: 6,
        d_spk: 5,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_head: 4,
        ffn_ratio: 4,
        update_cond_branch: true,
        use_speaker_condition: true,
    }
}

/// Fills every tensor (including adaLN output layers and biases) with random
/// values so that gates are nonzero.
fn randomize(params: &mut ConverterParams, seed: u64, scale: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, lin) in params.named_linears_mut() {
        let a = scale / (lin.d_in() as f32).sqrt();
        lin.weight_mut().mapv_inplace(|_| rng.random_range(-a..a));
        lin.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
}

fn random_inputs(
    cfg: &ConverterConfig,
    ts: usize,
    tc: usize,
    seed: u64,
) -> (CodecLatent, MelSpectrogram, SpeakerEmbedding) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = CodecLatent {
        frames: Array2::from_shape_simple_fn((ts, cfg.d_latent), || rng.random_range(-1.0..1.0)),
    };
    let c = MelSpectrogram {
        frames: Array2::from_shape_simple_fn((tc, cfg.d_cond), || rng.random_range(-3.0..1.0)),
    };
    let mut g: Vec<f32> = (0..cfg.d_spk).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = g.iter().map(|v| v * v).sum::<f32>().sqrt();
    g.iter_mut().for_each(|v| *v /= n);
    (z, c, SpeakerEmbedding { vector: g })
}

fn random_converter(cfg: ConverterConfig, seed: u64) -> Converter {
    let mut conv = Converter::init(cfg, seed).unwrap();
    randomize(conv.params_mut(), seed + 1, 1.0);
    conv
}

fn max_abs_diff(a: &Array2<f32>, b: &Array2<f32>) -> f32 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn default_config_matches_reported_hyperparameters() {
    let cfg = ConverterConfig::default();
    cfg.validate().unwrap();
    assert_eq!((cfg.d_latent, cfg.d_cond, cfg.d_spk), (1024, 128, 192));
    assert_eq!(
        (cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_head, cfg.ffn_ratio),
        (512, 6, 8, 64, 4)
    );
    assert!(cfg.update_cond_branch && cfg.use_speaker_condition);
}

#[test]
fn invalid_config_rejected() {
    let cfg = ConverterConfig {
        d_head: 32,
        ..ConverterConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
}

/// Independent shape walk: enumerates every tensor by hand from the config.
fn shape_walk_count(cfg: &ConverterConfig) -> usize {
    let d = cfg.d_model;
    let mut shapes: Vec<Vec<usize>> = vec![vec![cfg.d_latent, d], vec![d], vec![cfg.d_cond, d], vec![d]];
    for _layer in 0..cfg.n_layers {
        for _branch in 0..2 {
            shapes.push(vec![cfg.d_spk, d]);
            shapes.push(vec![d]);
            shapes.push(vec![d, 6 * d]);
            shapes.push(vec![6 * d]);
            shapes.push(vec![d, 3 * d]);
            shapes.push(vec![3 * d]);
            shapes.push(vec![d, d]);
            shapes.push(vec![d]);
            shapes.push(vec![d, d * cfg.ffn_ratio]);
            shapes.push(vec![d * cfg.ffn_ratio]);
            shapes.push(vec![d * cfg.ffn_ratio, d]);
            shapes.push(vec![d]);
        }
    }
    shapes.push(vec![d, cfg.d_latent]);
    shapes.push(vec![cfg.d_latent]);
    shapes.iter().map(|s| s.iter().product::<usize>()).sum()
}

#[test]
fn parameter_count() {
    let cfg = ConverterConfig::default();
    assert_eq!(shape_walk_count(&cfg), 59_017_216);
    assert_eq!(cfg.num_params(), 59_017_216);
    let tiny = tiny_cfg();
    assert_eq!(init_params(&tiny, 0).unwrap().num_params(), shape_walk_count(&tiny));
    assert_eq!(tiny.num_params(), shape_walk_count(&tiny));
}

#[test]
fn init_is_deterministic_and_adaln_zero() {
    let cfg = tiny_cfg();
    let a = init_params(&cfg, 42).unwrap();
    let b = init_params(&cfg, 42).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, init_params(&cfg, 43).unwrap());
    for (name, lin) in a.named_linears() {
        assert!(lin.bias.iter().all(|&v| v == 0.0), "{name} bias");
        if name.ends_with("adaln_out") {
            assert!(lin.weight().iter().all(|&v| v == 0.0), "{name}");
        } else {
            let bound = (6.0 / (lin.d_in() + lin.d_out()) as f32).sqrt();
            assert!(lin.weight().iter().all(|v| v.abs() <= bound));
            assert!(lin.weight().iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn zero_gate_block_is_identity() {
    let cfg = tiny_cfg();
    let conv = random_converter(cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for layer in 0..cfg.n_layers {
        let mut m = conv.modulations(&random_inputs(&cfg, 1, 1, 3).2)[layer].clone();
        for b in [&mut m.src, &mut m.cond] {
            b.gate_attn.fill(0.0);
            b.gate_ffn.fill(0.0);
            b.scale_attn.mapv_inplace(|_| rng.random_range(-2.0..2.0));
        }
        let h_src = Array2::from_shape_simple_fn((7, 8), || rng.random_range(-1.0f32..1.0));
        let h_cond = Array2::from_shape_simple_fn((5, 8), || rng.random_range(-1.0f32..1.0));
        let (mut a, mut b) = (h_src.clone(), h_cond.clone());
        conv.apply_block(layer, &mut a, &mut b, &m, true);
        assert_eq!(a, h_src);
        assert_eq!(b, h_cond);
    }
}

#[test]
fn forward_at_init_is_projection_path() {
    let cfg = tiny_cfg();
    let conv = Converter::init(cfg, 1).unwrap();
    let (z, c, g) = random_inputs(&cfg, 7, 5, 2);
    let (out, trace) = conv.forward_traced(&z, &c, &g).unwrap();
    for s in &trace.src_states {
        assert_eq!(s, &trace.src_states[0]);
    }
    for s in &trace.cond_states {
        assert_eq!(s, &trace.cond_states[0]);
    }
    let direct = conv.project_out(conv.embed_source(z.frames.view()).view());
    assert_eq!(out.frames, direct);
}

#[test]
fn output_length_follows_source() {
    let cfg = ConverterConfig::default();
    let conv = Converter::init(cfg, 0).unwrap();
    for ts in [1, 7, 150] {
        for tc in [1, 5, 146] {
            let (z, c, g) = random_inputs(&cfg, ts, tc, (ts * 1000 + tc) as u64);
            let out = conv.forward(&z, &c, &g).unwrap();
            assert_eq!(out.frames.dim(), (ts, 1024));
        }
    }
}

#[test]
fn condition_frames_influence_source() {
    let cfg = tiny_cfg();
    let conv = random_converter(cfg, 11);
    let (z, c, g) = random_inputs(&cfg, 4, 3, 12);
    let base = conv.forward(&z, &c, &g).unwrap();
    let mut c2 = c.clone();
    c2.frames[[1, 2]] += 0.5;
    let moved = conv.forward(&z, &c2, &g).unwrap();
    assert!(max_abs_diff(&base.frames, &moved.frames) > 0.0);

    let zeroed = MelSpectrogram {
        frames: Array2::zeros(c.frames.dim()),
    };
    let out = conv.forward(&z, &zeroed, &g).unwrap();
    assert!(max_abs_diff(&base.frames, &out.frames) > 0.0);
}

#[test]
fn speaker_switch() {
    let cfg = tiny_cfg();
    let (z, c, g) = random_inputs(&cfg, 4, 3, 21);
    let g2 = random_inputs(&cfg, 1, 1, 99).2;

    let on = random_converter(cfg, 20);
    let a = on.forward(&z, &c, &g).unwrap();
    let b = on.forward(&z, &c, &g2).unwrap();
    assert!(max_abs_diff(&a.frames, &b.frames) > 0.0);

    let off_cfg = ConverterConfig {
        use_speaker_condition: false,
        ..cfg
    };
    let off = Converter::new(off_cfg, on.params().clone()).unwrap();
    let a_off = off.forward(&z, &c, &g).unwrap();
    let b_off = off.forward(&z, &c, &g2).unwrap();
    assert_eq!(a_off, b_off);
    assert!(max_abs_diff(&a.frames, &a_off.frames) > 0.0);
}

#[test]
fn frozen_condition_stream() {
    let cfg = ConverterConfig {
        update_cond_branch: false,
        ..tiny_cfg()
    };
    let conv = random_converter(cfg, 30);
    let (z, c, g) = random_inputs(&cfg, 4, 3, 31);
    let (out, trace) = conv.forward_traced(&z, &c, &g).unwrap();
    assert_eq!(trace.cond_states.len(), cfg.n_layers + 1);
    for s in &trace.cond_states[1..] {
        assert_eq!(s, &trace.cond_states[0]);
    }
    // source stream still moves
    assert_ne!(trace.src_states[0], trace.src_states[1]);

    let updating = Converter::new(tiny_cfg(), conv.params().clone()).unwrap();
    let (out_upd, trace_upd) = updating.forward_traced(&z, &c, &g).unwrap();
    assert_ne!(trace_upd.cond_states[0], trace_upd.cond_states[1]);
    assert!(max_abs_diff(&out.frames, &out_upd.frames) > 0.0);
}

#[test]
fn traced_and_plain_forward_agree() {
    let cfg = tiny_cfg();
    let conv = random_converter(cfg, 40);
    let (z, c, g) = random_inputs(&cfg, 6, 4, 41);
    let plain = conv.forward(&z, &c, &g).unwrap();
    let (traced, _) = conv.forward_traced(&z, &c, &g).unwrap();
    assert_eq!(plain, traced);
}

#[test]
fn permutation_of_condition_frames() {
    let cfg = tiny_cfg();
    let conv = random_converter(cfg, 50);
    let (z, c, g) = random_inputs(&cfg, 5, 4, 51);
    let perm = [2usize, 0, 3, 1];

    // permute frames together with their position encodings by working on
    // the embedded condition stream directly
    let run_embedded = |h_cond0: Array2<f32>| {
        let mods = conv.modulations(&g);
        let mut h_src = conv.embed_source(z.frames.view());
        let mut h_cond = h_cond0;
        for (l, m) in mods.iter().enumerate() {
            conv.apply_block(l, &mut h_src, &mut h_cond, m, true);
        }
        conv.project_out(h_src.view())
    };
    let emb = conv.embed_condition(c.frames.view());
    let permuted_emb = Array2::from_shape_fn(emb.dim(), |(i, j)| emb[[perm[i], j]]);
    let a = run_embedded(emb);
    let b = run_embedded(permuted_emb);
    assert!(max_abs_diff(&a, &b) <= 1e-5 * a.iter().fold(1.0f32, |m, v| m.max(v.abs())));

    // permuting raw frames (positions re-assigned) changes the output
    let c_perm = MelSpectrogram {
        frames: Array2::from_shape_fn(c.frames.dim(), |(i, j)| c.frames[[perm[i], j]]),
    };
    let full = conv.forward(&z, &c, &g).unwrap();
    let full_perm = conv.forward(&z, &c_perm, &g).unwrap();
    assert!(max_abs_diff(&full.frames, &full_perm.frames) > 1e-4);
}

#[test]
fn input_validation() {
    let cfg = tiny_cfg();
    let conv = Converter::init(cfg, 0).unwrap();
    let (z, c, g) = random_inputs(&cfg, 3, 3, 0);
    let bad_z = CodecLatent {
        frames: Array2::zeros((3, 11)),
    };
    assert!(matches!(
        conv.forward(&bad_z, &c, &g),
        Err(Error::DimensionMismatch { .. })
    ));
    let empty_c = MelSpectrogram {
        frames: Array2::zeros((0, cfg.d_cond)),
    };
    assert!(matches!(
        conv.forward(&z, &empty_c, &g),
        Err(Error::DimensionMismatch { .. })
    ));
    let bad_g = SpeakerEmbedding { vector: vec![0.0; 4] };
    assert!(matches!(
        conv.forward(&z, &c, &bad_g),
        Err(Error::DimensionMismatch { .. })
    ));
    let mut nan_z = z.clone();
    nan_z.frames[[0, 0]] = f32::NAN;
    assert!(matches!(conv.forward(&nan_z, &c, &g), Err(Error::NonFinite(_))));
}

#[test]
fn cached_state_follows_parameter_edits() {
    let cfg = tiny_cfg();
    let (z, c, g) = random_inputs(&cfg, 5, 4, 31);
    let g2 = random_inputs(&cfg, 1, 1, 32).2;
    let mut conv = random_converter(cfg, 30);
    let first = conv.forward(&z, &c, &g).unwrap();
    // alternating speakers must not reuse a stale modulation
    let other = conv.forward(&z, &c, &g2).unwrap();
    assert_eq!(conv.forward(&z, &c, &g).unwrap(), first);
    assert_ne!(other, first);

    randomize(conv.params_mut(), 77, 1.0);
    let fresh = Converter::new(cfg, conv.params().clone()).unwrap();
    let edited = conv.forward(&z, &c, &g).unwrap();
    assert_eq!(edited, fresh.forward(&z, &c, &g).unwrap());
    assert_ne!(edited, first);
}

#[test]
fn identity_converter_passthrough() {
    let cfg = tiny_cfg();
    let (z, c, g) = random_inputs(&cfg, 3, 2, 0);
    assert_eq!(IdentityConverter.convert(&z, &c, &g).unwrap(), z);
}

mod checkpoints {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let conv = random_converter(cfg, 60);
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_params(&p1, &cfg, conv.params()).unwrap();
        let (cfg2, params2) = load_params(&p1).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(&params2, conv.params());
        save_params(&p2, &cfg2, &params2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(&load_params_with_config(&p1, &cfg).unwrap(), conv.params());
    }

    #[test]
    fn edited_shape_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let p = dir.path().join("a.ckpt");
        save_params(&p, &cfg, &init_params(&cfg, 0).unwrap()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let needle = b"\"shape\":[12,8]";
        let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[pos + needle.len() - 2] = b'9';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_params(&p), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn layer_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ConverterConfig {
            n_layers: 6,
            ..tiny_cfg()
        };
        let p = dir.path().join("a.ckpt");
        save_params(&p, &cfg, &init_params(&cfg, 0).unwrap()).unwrap();
        let five = ConverterConfig { n_layers: 5, ..cfg };
        assert!(matches!(
            load_params_with_config(&p, &five),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn truncated_and_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let p = dir.path().join("a.ckpt");
        save_params(&p, &cfg, &init_params(&cfg, 0).unwrap()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_params(&p), Err(Error::TruncatedFile(_))));
        std::fs::write(&p, &bytes[..20]).unwrap();
        assert!(matches!(load_params(&p), Err(Error::TruncatedFile(_))));
        std::fs::write(&p, b"RIFF0000WAVEfmt ").unwrap();
        assert!(matches!(load_params(&p), Err(Error::BadMagic(_))));
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let p = dir.path().join("a.ckpt");
        save_params(&p, &cfg, &init_params(&cfg, 0).unwrap()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let needle = b"\"format_version\":1";
        let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[pos + needle.len() - 1] = b'7';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_params(&p),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
    }
}
