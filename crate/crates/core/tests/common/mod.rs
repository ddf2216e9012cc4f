//! Shared test helpers, including a plain f64 reference forward of the
//! converter built only from the public parameter tensors.

#![allow(dead_code)]

use latent_vc::converter::ConverterParams;
use latent_vc::linalg::Linear;
use latent_vc::{CodecLatent, ConverterConfig, MelSpectrogram, SpeakerEmbedding, Waveform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn noise(len: usize, seed: u64, amp: f32) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.random_range(-amp..amp)).collect())
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

/// Overwrites every weight and bias (gates included) with uniform draws.
pub fn randomize(params: &mut ConverterParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, lin) in params.named_linears_mut() {
        let a = 1.0 / (lin.d_in() as f32).sqrt();
        lin.weight_mut().mapv_inplace(|_| rng.random_range(-a..a));
        lin.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
}

pub fn random_inputs(
    cfg: &ConverterConfig,
    ts: usize,
    tc: usize,
    seed: u64,
) -> (CodecLatent, MelSpectrogram, SpeakerEmbedding) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = CodecLatent {
        frames: ndarray::Array2::from_shape_simple_fn((ts, cfg.d_latent), || rng.random_range(-1.0..1.0)),
    };
    let c = MelSpectrogram {
        frames: ndarray::Array2::from_shape_simple_fn((tc, cfg.d_cond), || rng.random_range(-4.0..1.0)),
    };
    let mut g: Vec<f32> = (0..cfg.d_spk).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = g.iter().map(|v| v * v).sum::<f32>().sqrt();
    g.iter_mut().for_each(|v| *v /= n);
    (z, c, SpeakerEmbedding { vector: g })
}

type Mat = Vec<Vec<f64>>;

fn to_mat(rows: usize, cols: usize, at: impl Fn(usize, usize) -> f32) -> Mat {
    (0..rows)
        .map(|i| (0..cols).map(|j| at(i, j) as f64).collect())
        .collect()
}

fn affine(x: &Mat, lin: &Linear) -> Mat {
    let w = lin.weight();
    x.iter()
        .map(|row| {
            (0..lin.d_out())
                .map(|o| lin.bias[o] as f64 + row.iter().enumerate().map(|(i, v)| v * w[[i, o]] as f64).sum::<f64>())
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn norm_rows(x: &Mat) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter().map(|v| (v - mean) / (var + 1e-6).sqrt()).collect()
        })
        .collect()
}

fn positions(x: &mut Mat) {
    let d = x[0].len();
    for (p, row) in x.iter_mut().enumerate() {
        for i in 0..d / 2 {
            let ang = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            row[2 * i] += ang.sin();
            row[2 * i + 1] += ang.cos();
        }
    }
}

/// Per branch: [scale1, shift1, gate1, scale2, shift2, gate2].
fn modulation(cfg: &ConverterConfig, adaln_in: &Linear, adaln_out: &Linear, g: &[f32]) -> Vec<Vec<f64>> {
    let d = cfg.d_model;
    if !cfg.use_speaker_condition {
        return (0..6).map(|k| vec![if k % 3 == 2 { 1.0 } else { 0.0 }; d]).collect();
    }
    let h: Mat = affine(&vec![g.iter().map(|&v| v as f64).collect()], adaln_in);
    let h = vec![h[0].iter().map(|&v| gelu(v)).collect()];
    let flat = &affine(&h, adaln_out)[0];
    (0..6).map(|k| flat[k * d..(k + 1) * d].to_vec()).collect()
}

fn modulated(x: &Mat, scale: &[f64], shift: &[f64]) -> Mat {
    norm_rows(x)
        .iter()
        .map(|r| {
            r.iter()
                .zip(scale)
                .zip(shift)
                .map(|((v, s), b)| v * (1.0 + s) + b)
                .collect()
        })
        .collect()
}

/// Reference forward pass: every product written out as explicit loops.
pub fn oracle_forward(
    cfg: &ConverterConfig,
    p: &ConverterParams,
    z: &CodecLatent,
    c: &MelSpectrogram,
    g: &SpeakerEmbedding,
) -> Vec<f64> {
    let d = cfg.d_model;
    let (ts, tc) = (z.frames.nrows(), c.frames.nrows());
    let mut hs = affine(&to_mat(ts, cfg.d_latent, |i, j| z.frames[[i, j]]), &p.src_in);
    let mut hc = affine(&to_mat(tc, cfg.d_cond, |i, j| c.frames[[i, j]]), &p.cond_in);
    positions(&mut hs);
    positions(&mut hc);

    for layer in &p.layers {
        let ms = modulation(cfg, &layer.src.adaln_in, &layer.src.adaln_out, &g.vector);
        let mc = modulation(cfg, &layer.cond.adaln_in, &layer.cond.adaln_out, &g.vector);
        let mut qkv = affine(&modulated(&hs, &ms[0], &ms[1]), &layer.src.qkv);
        qkv.extend(affine(&modulated(&hc, &mc[0], &mc[1]), &layer.cond.qkv));
        let n = ts + tc;
        let mut att = vec![vec![0.0; d]; n];
        for h in 0..cfg.n_heads {
            let off = h * cfg.d_head;
            for (qi, out_row) in att.iter_mut().enumerate() {
                let scores: Vec<f64> = (0..n)
                    .map(|ki| {
                        (0..cfg.d_head)
                            .map(|e| qkv[qi][off + e] * qkv[ki][d + off + e])
                            .sum::<f64>()
                            / (cfg.d_head as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = ex.iter().sum();
                for e in 0..cfg.d_head {
                    out_row[off + e] = (0..n).map(|ki| ex[ki] / total * qkv[ki][2 * d + off + e]).sum::<f64>();
                }
            }
        }
        let att_c = att.split_off(ts);
        let upd_s = affine(&att, &layer.src.attn_out);
        let upd_c = affine(&att_c, &layer.cond.attn_out);
        let mut new_s = hs.clone();
        let mut new_c = hc.clone();
        residual(&mut new_s, &upd_s, &ms[2]);
        residual(&mut new_c, &upd_c, &mc[2]);
        let ffn = |x: &Mat, m: &[Vec<f64>], a: &Linear, b: &Linear| {
            let u: Mat = affine(&modulated(x, &m[3], &m[4]), a)
                .into_iter()
                .map(|r| r.into_iter().map(gelu).collect())
                .collect();
            affine(&u, b)
        };
        let f_s = ffn(&new_s, &ms, &layer.src.ffn_in, &layer.src.ffn_out);
        residual(&mut new_s, &f_s, &ms[5]);
        hs = new_s;
        if cfg.update_cond_branch {
            let f_c = ffn(&new_c, &mc, &layer.cond.ffn_in, &layer.cond.ffn_out);
            residual(&mut new_c, &f_c, &mc[5]);
            hc = new_c;
        }
    }
    affine(&norm_rows(&hs), &p.src_out).into_iter().flatten().collect()
}

fn residual(h: &mut Mat, upd: &Mat, gate: &[f64]) {
    for (hr, ur) in h.iter_mut().zip(upd) {
        for ((v, u), a) in hr.iter_mut().zip(ur).zip(gate) {
            *v += a * u;
        }
    }
}
