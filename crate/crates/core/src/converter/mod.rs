//! Dual-conditioned acoustic converter.
//!
//! Two token streams share each transformer block: the source codec latents
//! and the reference mel frames. Both are projected to `d_model`, get their
//! own sinusoidal positions (each starting at 0), and are concatenated along
//! time for a single unmasked softmax attention. The speaker embedding drives
//! per-branch adaLN modulation (scale, shift and residual gate for both
//! sublayers). Only the source stream is projected back to latent space.

mod checkpoint;

pub use checkpoint::{load_params, load_params_with_config, save_params, CHECKPOINT_MAGIC, FORMAT_VERSION};

use std::sync::{Arc, Mutex};

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::CodecLatent;
use crate::error::{Error, Result};
use crate::features::{MelSpectrogram, SpeakerEmbedding};
use crate::linalg::{gelu, gelu_inplace, layer_norm, matmul_into, sinusoidal_pe, softmax_rows_inplace, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConverterConfig {
    pub d_latent: usize,
    pub d_cond: usize,
    pub d_spk: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub ffn_ratio: usize,
    /// When false the condition stream keeps its input projection through
    /// every layer and is only attended to.
    pub update_cond_branch: bool,
    /// When false all modulations are forced to γ = β = 0, α = 1.
    pub use_speaker_condition: bool,
}

impl Default for ConverterConfig {
    fn default() -> Self {
        Self {
            d_latent: 1024,
            d_cond: 128,
            d_spk: 192,
            d_model: 512,
            n_layers: 6,
            n_heads: 8,
            d_head: 64,
            ffn_ratio: 4,
            update_cond_branch: true,
            use_speaker_condition: true,
        }
    }
}

impl ConverterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_heads * self.d_head != self.d_model {
            return bad("n_heads * d_head must equal d_model");
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return bad("d_model must be even and positive");
        }
        if self.d_latent == 0 || self.d_cond == 0 || self.d_spk == 0 || self.ffn_ratio == 0 {
            return bad("dimensions must be positive");
        }
        Ok(())
    }

    pub fn d_ffn(&self) -> usize {
        self.d_model * self.ffn_ratio
    }

    /// Closed-form parameter count.
    pub fn num_params(&self) -> usize {
        let lin = |i: usize, o: usize| i * o + o;
        let d = self.d_model;
        let branch = lin(self.d_spk, d)
            + lin(d, 6 * d)
            + lin(d, 3 * d)
            + lin(d, d)
            + lin(d, self.d_ffn())
            + lin(self.d_ffn(), d);
        lin(self.d_latent, d) + lin(self.d_cond, d) + 2 * self.n_layers * branch + lin(d, self.d_latent)
    }
}

/// Per-branch weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub adaln_in: Linear,
    pub adaln_out: Linear,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub src: BranchParams,
    pub cond: BranchParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConverterParams {
    pub src_in: Linear,
    pub cond_in: Linear,
    pub layers: Vec<LayerParams>,
    pub src_out: Linear,
}

impl BranchParams {
    fn linears(&self) -> [(&'static str, &Linear); 6] {
        [
            ("adaln_in", &self.adaln_in),
            ("adaln_out", &self.adaln_out),
            ("qkv", &self.qkv),
            ("attn_out", &self.attn_out),
            ("ffn_in", &self.ffn_in),
            ("ffn_out", &self.ffn_out),
        ]
    }

    fn linears_mut(&mut self) -> [(&'static str, &mut Linear); 6] {
        [
            ("adaln_in", &mut self.adaln_in),
            ("adaln_out", &mut self.adaln_out),
            ("qkv", &mut self.qkv),
            ("attn_out", &mut self.attn_out),
            ("ffn_in", &mut self.ffn_in),
            ("ffn_out", &mut self.ffn_out),
        ]
    }
}

impl ConverterParams {
    /// All zeros, with every layer shaped for `cfg`.
    pub fn zeros(cfg: &ConverterConfig) -> Self {
        let d = cfg.d_model;
        let branch = || BranchParams {
            adaln_in: Linear::zeros(cfg.d_spk, d),
            adaln_out: Linear::zeros(d, 6 * d),
            qkv: Linear::zeros(d, 3 * d),
            attn_out: Linear::zeros(d, d),
            ffn_in: Linear::zeros(d, cfg.d_ffn()),
            ffn_out: Linear::zeros(cfg.d_ffn(), d),
        };
        Self {
            src_in: Linear::zeros(cfg.d_latent, d),
            cond_in: Linear::zeros(cfg.d_cond, d),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    src: branch(),
                    cond: branch(),
                })
                .collect(),
            src_out: Linear::zeros(d, cfg.d_latent),
        }
    }

    /// Every affine layer in canonical order with its dotted name.
    pub fn named_linears(&self) -> Vec<(String, &Linear)> {
        let mut out = vec![
            ("src_in".to_string(), &self.src_in),
            ("cond_in".to_string(), &self.cond_in),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (b, branch) in [("src", &layer.src), ("cond", &layer.cond)] {
                for (n, lin) in branch.linears() {
                    out.push((format!("layers.{l}.{b}.{n}"), lin));
                }
            }
        }
        out.push(("src_out".to_string(), &self.src_out));
        out
    }

    pub fn named_linears_mut(&mut self) -> Vec<(String, &mut Linear)> {
        let mut out = vec![
            ("src_in".to_string(), &mut self.src_in),
            ("cond_in".to_string(), &mut self.cond_in),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (b, branch) in [("src", &mut layer.src), ("cond", &mut layer.cond)] {
                for (n, lin) in branch.linears_mut() {
                    out.push((format!("layers.{l}.{b}.{n}"), lin));
                }
            }
        }
        out.push(("src_out".to_string(), &mut self.src_out));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_linears().iter().map(|(_, l)| l.num_params()).sum()
    }
}

/// Glorot-uniform weights and zero biases, except that the final adaLN layer
/// of every branch is all zeros so each block starts as the identity.
pub fn init_params(cfg: &ConverterConfig, seed: u64) -> Result<ConverterParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ConverterParams::zeros(cfg);
    for (name, lin) in params.named_linears_mut() {
        if name.ends_with("adaln_out") {
            continue;
        }
        *lin = Linear::glorot(lin.d_in(), lin.d_out(), &mut rng);
    }
    Ok(params)
}

/// The six modulation vectors of one branch in one block.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulation {
    pub scale_attn: Array1<f32>,
    pub shift_attn: Array1<f32>,
    pub gate_attn: Array1<f32>,
    pub scale_ffn: Array1<f32>,
    pub shift_ffn: Array1<f32>,
    pub gate_ffn: Array1<f32>,
}

impl Modulation {
    /// γ = β = 0, α = 1: plain pre-norm residual block.
    pub fn neutral(d: usize) -> Self {
        Self {
            scale_attn: Array1::zeros(d),
            shift_attn: Array1::zeros(d),
            gate_attn: Array1::ones(d),
            scale_ffn: Array1::zeros(d),
            shift_ffn: Array1::zeros(d),
            gate_ffn: Array1::ones(d),
        }
    }

    /// Splits a 6·d adaLN output in (γ₁, β₁, α₁, γ₂, β₂, α₂) order.
    pub fn from_flat(v: &[f32]) -> Self {
        let d = v.len() / 6;
        let part = |i: usize| Array1::from(v[i * d..(i + 1) * d].to_vec());
        Self {
            scale_attn: part(0),
            shift_attn: part(1),
            gate_attn: part(2),
            scale_ffn: part(3),
            shift_ffn: part(4),
            gate_ffn: part(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerModulation {
    pub src: Modulation,
    pub cond: Modulation,
}

/// Residual streams after the input projections and after every block.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub src_states: Vec<Array2<f32>>,
    pub cond_states: Vec<Array2<f32>>,
}

/// Anything that maps source latents to converted latents given the two
/// reference conditions.
pub trait LatentConverter: Send + Sync {
    fn convert(&self, z: &CodecLatent, c: &MelSpectrogram, g: &SpeakerEmbedding) -> Result<CodecLatent>;
}

/// Returns the source latents unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityConverter;

impl LatentConverter for IdentityConverter {
    fn convert(&self, z: &CodecLatent, _c: &MelSpectrogram, _g: &SpeakerEmbedding) -> Result<CodecLatent> {
        Ok(z.clone())
    }
}

/// Modulations for the most recent speaker vector. A stream reuses one
/// speaker embedding for every chunk, so this is computed once per stream.
#[derive(Debug, Default)]
struct ModulationCache(Mutex<Option<CachedModulations>>);

type CachedModulations = (Vec<f32>, Arc<Vec<LayerModulation>>);

impl Clone for ModulationCache {
    fn clone(&self) -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone)]
pub struct Converter {
    cfg: ConverterConfig,
    params: ConverterParams,
    mod_cache: ModulationCache,
}

impl Converter {
    pub fn new(cfg: ConverterConfig, params: ConverterParams) -> Result<Self> {
        cfg.validate()?;
        check_shapes(&cfg, &params)?;
        Ok(Self {
            cfg,
            params,
            mod_cache: ModulationCache::default(),
        })
    }

    pub fn init(cfg: ConverterConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Self::new(cfg, params)
    }

    pub fn config(&self) -> &ConverterConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ConverterParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ConverterParams {
        self.mod_cache = ModulationCache::default();
        &mut self.params
    }

    /// Modulation vectors for every layer and branch given a speaker vector.
    pub fn modulations(&self, g: &SpeakerEmbedding) -> Vec<LayerModulation> {
        let d = self.cfg.d_model;
        let branch = |p: &BranchParams| {
            if !self.cfg.use_speaker_condition {
                return Modulation::neutral(d);
            }
            let mut hidden = p.adaln_in.forward_vec(&g.vector);
            hidden.iter_mut().for_each(|v| *v = gelu(*v));
            Modulation::from_flat(&p.adaln_out.forward_vec(&hidden))
        };
        self.params
            .layers
            .iter()
            .map(|l| LayerModulation {
                src: branch(&l.src),
                cond: branch(&l.cond),
            })
            .collect()
    }

    fn cached_modulations(&self, g: &SpeakerEmbedding) -> Arc<Vec<LayerModulation>> {
        let mut cache = self.mod_cache.0.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((key, mods)) = cache.as_ref() {
            if key == &g.vector {
                return Arc::clone(mods);
            }
        }
        let mods = Arc::new(self.modulations(g));
        *cache = Some((g.vector.clone(), Arc::clone(&mods)));
        mods
    }

    pub fn embed_source(&self, z: ArrayView2<f32>) -> Array2<f32> {
        let mut h = self.params.src_in.forward(z);
        h += &sinusoidal_pe(z.nrows(), self.cfg.d_model);
        h
    }

    pub fn embed_condition(&self, c: ArrayView2<f32>) -> Array2<f32> {
        let mut h = self.params.cond_in.forward(c);
        h += &sinusoidal_pe(c.nrows(), self.cfg.d_model);
        h
    }

    /// Output head: parameter-free norm then projection back to latent space.
    pub fn project_out(&self, h_src: ArrayView2<f32>) -> Array2<f32> {
        self.params.src_out.forward(layer_norm(h_src).view())
    }

    fn check_inputs(&self, z: &CodecLatent, c: &MelSpectrogram, g: &SpeakerEmbedding) -> Result<()> {
        let dims = [
            ("source latent width", self.cfg.d_latent, z.frames.ncols()),
            ("condition width", self.cfg.d_cond, c.frames.ncols()),
            ("speaker embedding", self.cfg.d_spk, g.vector.len()),
        ];
        for (what, expected, got) in dims {
            if expected != got {
                return Err(Error::DimensionMismatch { what, expected, got });
            }
        }
        if z.num_frames() == 0 {
            return Err(Error::DimensionMismatch {
                what: "source frames (min)",
                expected: 1,
                got: 0,
            });
        }
        if c.num_frames() == 0 {
            return Err(Error::DimensionMismatch {
                what: "condition frames (min)",
                expected: 1,
                got: 0,
            });
        }
        if !z.frames.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("source latent"));
        }
        if !c.frames.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("condition"));
        }
        if !g.vector.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("speaker embedding"));
        }
        Ok(())
    }

    pub fn forward(&self, z: &CodecLatent, c: &MelSpectrogram, g: &SpeakerEmbedding) -> Result<CodecLatent> {
        self.run(z, c, g, None)
    }

    /// Forward pass that also records every intermediate residual stream.
    pub fn forward_traced(
        &self,
        z: &CodecLatent,
        c: &MelSpectrogram,
        g: &SpeakerEmbedding,
    ) -> Result<(CodecLatent, ForwardTrace)> {
        let mut trace = ForwardTrace::default();
        let out = self.run(z, c, g, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn run(
        &self,
        z: &CodecLatent,
        c: &MelSpectrogram,
        g: &SpeakerEmbedding,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<CodecLatent> {
        self.check_inputs(z, c, g)?;
        let mods = self.cached_modulations(g);
        let mut h_src = self.embed_source(z.frames.view());
        let mut h_cond = self.embed_condition(c.frames.view());
        if let Some(t) = trace.as_deref_mut() {
            t.src_states.push(h_src.clone());
            t.cond_states.push(h_cond.clone());
        }
        let n = self.cfg.n_layers;
        for (l, m) in mods.iter().enumerate() {
            // the condition stream's final state is never read unless traced
            let need_cond = self.cfg.update_cond_branch && (l + 1 < n || trace.is_some());
            self.apply_block(l, &mut h_src, &mut h_cond, m, need_cond);
            if let Some(t) = trace.as_deref_mut() {
                t.src_states.push(h_src.clone());
                t.cond_states.push(h_cond.clone());
            }
        }
        let out = self.project_out(h_src.view());
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("converter output"));
        }
        Ok(CodecLatent { frames: out })
    }

    /// One joint-attention block. The source stream is always updated; the
    /// condition stream is updated only when `update_cond` is set (otherwise
    /// it contributes keys and values but its residual stream is untouched).
    pub fn apply_block(
        &self,
        layer: usize,
        h_src: &mut Array2<f32>,
        h_cond: &mut Array2<f32>,
        m: &LayerModulation,
        update_cond: bool,
    ) {
        let p = &self.params.layers[layer];
        let d = self.cfg.d_model;
        let (ts, tc) = (h_src.nrows(), h_cond.nrows());
        let n = ts + tc;

        // joint Q/K/V: rows [0, ts) from the source branch, [ts, n) from the condition branch
        let mut qkv = Array2::<f32>::zeros((n, 3 * d));
        let x_src = modulate(layer_norm(h_src.view()), &m.src.scale_attn, &m.src.shift_attn);
        p.src.qkv.forward_into(x_src.view(), qkv.slice_mut(s![..ts, ..]));
        let x_cond = modulate(layer_norm(h_cond.view()), &m.cond.scale_attn, &m.cond.shift_attn);
        p.cond.qkv.forward_into(x_cond.view(), qkv.slice_mut(s![ts.., ..]));

        let n_queries = if update_cond { n } else { ts };
        let attn = joint_attention(qkv.view(), n_queries, self.cfg.n_heads, self.cfg.d_head);

        let out = p.src.attn_out.forward(attn.slice(s![..ts, ..]));
        gated_residual(h_src.view_mut(), out.view(), &m.src.gate_attn);
        if update_cond {
            let out = p.cond.attn_out.forward(attn.slice(s![ts.., ..]));
            gated_residual(h_cond.view_mut(), out.view(), &m.cond.gate_attn);
        }

        ffn_sublayer(&p.src, h_src, &m.src);
        if update_cond {
            ffn_sublayer(&p.cond, h_cond, &m.cond);
        }
        debug_assert_eq!(h_src.ncols(), d);
    }
}

impl LatentConverter for Converter {
    fn convert(&self, z: &CodecLatent, c: &MelSpectrogram, g: &SpeakerEmbedding) -> Result<CodecLatent> {
        self.forward(z, c, g)
    }
}

fn check_shapes(cfg: &ConverterConfig, params: &ConverterParams) -> Result<()> {
    let expected = ConverterParams::zeros(cfg);
    if expected.layers.len() != params.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} layers, got {}",
            expected.layers.len(),
            params.layers.len()
        )));
    }
    for ((name, e), (_, g)) in expected.named_linears().into_iter().zip(params.named_linears()) {
        if e.weight().dim() != g.weight().dim() || e.bias.len() != g.bias.len() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: expected {:?}, got {:?}",
                e.weight().dim(),
                g.weight().dim()
            )));
        }
    }
    Ok(())
}

/// x·(1 + γ) + β, row-wise.
fn modulate(mut x: Array2<f32>, scale: &Array1<f32>, shift: &Array1<f32>) -> Array2<f32> {
    for mut row in x.axis_iter_mut(Axis(0)) {
        Zip::from(&mut row)
            .and(scale)
            .and(shift)
            .for_each(|v, &g, &b| *v = *v * (1.0 + g) + b);
    }
    x
}

/// h += α ⊙ out. Zero gates leave `h` bitwise untouched.
fn gated_residual(mut h: ArrayViewMut2<f32>, out: ArrayView2<f32>, gate: &Array1<f32>) {
    Zip::from(h.rows_mut()).and(out.rows()).for_each(|mut hr, or| {
        Zip::from(&mut hr).and(&or).and(gate).for_each(|h, &o, &a| {
            if a != 0.0 {
                *h += a * o;
            }
        });
    });
}

fn ffn_sublayer(p: &BranchParams, h: &mut Array2<f32>, m: &Modulation) {
    let x = modulate(layer_norm(h.view()), &m.scale_ffn, &m.shift_ffn);
    let mut u = p.ffn_in.forward(x.view());
    gelu_inplace(u.as_slice_mut().expect("standard layout"));
    let out = p.ffn_out.forward(u.view());
    gated_residual(h.view_mut(), out.view(), &m.gate_ffn);
}

/// Unmasked multi-head softmax attention over the packed `[Q | K | V]` rows.
/// Only the first `n_queries` rows attend; all rows serve as keys/values.
fn joint_attention(qkv: ArrayView2<f32>, n_queries: usize, n_heads: usize, d_head: usize) -> Array2<f32> {
    let n = qkv.nrows();
    let d = n_heads * d_head;
    let scale = 1.0 / (d_head as f32).sqrt();
    let mut out = Array2::<f32>::zeros((n_queries, d));
    let mut scores = Array2::<f32>::zeros((n_queries, n));
    for h in 0..n_heads {
        let cols = h * d_head..(h + 1) * d_head;
        let q = qkv.slice(s![..n_queries, cols.clone()]);
        let k = qkv.slice(s![.., d + cols.start..d + cols.end]);
        let v = qkv.slice(s![.., 2 * d + cols.start..2 * d + cols.end]);
        matmul_into(q, k.t(), scores.view_mut(), false);
        scores.mapv_inplace(|x| x * scale);
        softmax_rows_inplace(scores.view_mut());
        matmul_into(scores.view(), v, out.slice_mut(s![.., cols]), false);
    }
    out
}

#[cfg(test)]
mod tests;
