//! Dense f32 building blocks for the converter: strided GEMM over ndarray
//! views, affine layers, parameter-free layer norm and GELU.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

#[cfg(target_arch = "x86_64")]
mod avx512;

/// `out = a · b` (or `out += a · b` when `accumulate`), for arbitrary strides.
/// Uses the AVX-512 kernel when the CPU has it, the `gemm` crate otherwise.
pub fn matmul_into(a: ArrayView2<f32>, b: ArrayView2<f32>, out: ArrayViewMut2<f32>, accumulate: bool) {
    #[cfg(target_arch = "x86_64")]
    if avx512::available() {
        return matmul_with(a, b, out, accumulate, |m, n, k, a, b, c| {
            use avx512::Strided;
            // SAFETY: views guarantee in-bounds strides; `out` is uniquely
            // borrowed and the CPU feature was detected above.
            unsafe {
                avx512::sgemm(
                    m,
                    n,
                    k,
                    Strided {
                        ptr: a.0,
                        rs: a.1,
                        cs: a.2,
                    },
                    Strided {
                        ptr: b.0,
                        rs: b.1,
                        cs: b.2,
                    },
                    Strided {
                        ptr: c.0,
                        rs: c.1,
                        cs: c.2,
                    },
                    accumulate,
                )
            }
        });
    }
    portable_matmul_into(a, b, out, accumulate)
}

/// [`matmul_into`] through the `gemm` crate only.
pub fn portable_matmul_into(a: ArrayView2<f32>, b: ArrayView2<f32>, out: ArrayViewMut2<f32>, accumulate: bool) {
    matmul_with(a, b, out, accumulate, |m, n, k, a, b, c| {
        // SAFETY: as above; gemm reads `c` only when accumulating.
        unsafe {
            gemm::gemm(
                m,
                n,
                k,
                c.0,
                c.2,
                c.1,
                accumulate,
                a.0,
                a.2,
                a.1,
                b.0,
                b.2,
                b.1,
                if accumulate { 1.0 } else { 0.0 },
                1.0,
                false,
                false,
                false,
                gemm::Parallelism::Rayon(0),
            )
        }
    })
}

type Operand<P> = (P, isize, isize);

fn matmul_with(
    a: ArrayView2<f32>,
    b: ArrayView2<f32>,
    mut out: ArrayViewMut2<f32>,
    accumulate: bool,
    kernel: impl FnOnce(usize, usize, usize, Operand<*const f32>, Operand<*const f32>, Operand<*mut f32>),
) {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(out.dim(), (m, n), "output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let (a_rs, a_cs) = (a.strides()[0], a.strides()[1]);
    let (b_rs, b_cs) = (b.strides()[0], b.strides()[1]);
    let (o_rs, o_cs) = (out.strides()[0], out.strides()[1]);
    kernel(
        m,
        n,
        k,
        (a.as_ptr(), a_rs, a_cs),
        (b.as_ptr(), b_rs, b_cs),
        (out.as_mut_ptr(), o_rs, o_cs),
    );
}

pub fn matmul(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Array2<f32> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    matmul_into(a, b, out.view_mut(), false);
    out
}

/// Affine map `x · W + b` with `W` stored as (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Array2<f32>,
    pub bias: Array1<f32>,
    packed: PackedWeight,
}

/// Kernel-layout copy of the weight, built on first use.
#[derive(Debug, Clone, Default)]
struct PackedWeight {
    #[cfg(target_arch = "x86_64")]
    cell: std::sync::OnceLock<avx512::PackedB>,
}

impl PartialEq for Linear {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight && self.bias == other.bias
    }
}

impl Linear {
    pub fn new(weight: Array2<f32>, bias: Array1<f32>) -> Self {
        assert_eq!(weight.ncols(), bias.len(), "bias length");
        Self {
            weight,
            bias,
            packed: PackedWeight::default(),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self::new(Array2::zeros((d_in, d_out)), Array1::zeros(d_out))
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (d_in + d_out) as f64).sqrt() as f32;
        let weight = Array2::from_shape_simple_fn((d_in, d_out), || rng.random_range(-a..=a));
        Self::new(weight, Array1::zeros(d_out))
    }

    pub fn weight(&self) -> &Array2<f32> {
        &self.weight
    }

    /// Mutable weight access; drops the packed copy.
    pub fn weight_mut(&mut self) -> &mut Array2<f32> {
        self.packed = PackedWeight::default();
        &mut self.weight
    }

    pub fn set_weight(&mut self, weight: Array2<f32>) {
        assert_eq!(weight.dim(), self.weight.dim(), "weight shape");
        *self.weight_mut() = weight;
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut out = Array2::zeros((x.nrows(), self.d_out()));
        self.forward_into(x, out.view_mut());
        out
    }

    pub fn forward_into(&self, x: ArrayView2<f32>, mut out: ArrayViewMut2<f32>) {
        let dim = out.dim();
        out.assign(&self.bias.broadcast(dim).expect("bias broadcast"));
        #[cfg(target_arch = "x86_64")]
        if avx512::available() {
            let w = self.weight.view();
            let packed = self.packed.cell.get_or_init(|| {
                let (k, n) = w.dim();
                let b = avx512::Strided {
                    ptr: w.as_ptr(),
                    rs: w.strides()[0],
                    cs: w.strides()[1],
                };
                // SAFETY: the view addresses exactly the k×n weight.
                unsafe { avx512::PackedB::new(k, n, b) }
            });
            debug_assert_eq!(packed.dim(), w.dim());
            return matmul_with(x, w, out, true, |m, _, _, a, _, c| {
                use avx512::Strided;
                // SAFETY: as in `matmul_into`; `packed` matches the weight shape.
                unsafe {
                    avx512::sgemm_packed(
                        m,
                        Strided {
                            ptr: a.0,
                            rs: a.1,
                            cs: a.2,
                        },
                        packed,
                        Strided {
                            ptr: c.0,
                            rs: c.1,
                            cs: c.2,
                        },
                        true,
                    )
                }
            });
        }
        matmul_into(x, self.weight.view(), out, true);
    }

    /// Single-vector forward.
    pub fn forward_vec(&self, x: &[f32]) -> Vec<f32> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.forward(xv).into_raw_vec_and_offset().0
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-6;

/// Row-wise layer norm without affine parameters.
pub fn layer_norm(x: ArrayView2<f32>) -> Array2<f32> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.len() as f32;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// `exp` via 2^n · p(r) range reduction; relative error below 2e-7 on
/// [-87, 88]. Branch-free so slice loops vectorize.
#[inline(always)]
pub fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 88.0);
    // round-to-nearest via the 1.5·2^23 magic constant (no libm call)
    const ROUND: f32 = 12_582_912.0;
    let n = (x * LOG2E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 5e-1;
    let p = p * r * r + r + 1.0;
    let bits = ((n as i32 + 127) as u32) << 23;
    p * f32::from_bits(bits)
}

/// tanh approximation of GELU, written as x·σ(2u) with
/// u = √(2/π)(x + 0.044715x³).
#[inline(always)]
pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    x / (1.0 + fast_exp(-2.0 * u))
}

pub fn gelu_inplace(xs: &mut [f32]) {
    for v in xs.iter_mut() {
        *v = gelu(*v);
    }
}

/// Sinusoidal absolute position encoding for positions `0..len`:
/// `pe[p, 2i] = sin(p·ω_i)`, `pe[p, 2i+1] = cos(p·ω_i)`, ω_i = 10000^(-2i/dim).
pub fn sinusoidal_pe(len: usize, dim: usize) -> Array2<f32> {
    let mut pe = Array2::zeros((len, dim));
    for i in 0..dim / 2 {
        let freq = (10000f64).powf(-((2 * i) as f64) / dim as f64);
        let (step_s, step_c) = freq.sin_cos();
        let (mut s, mut c) = (0.0f64, 1.0f64);
        for p in 0..len {
            // re-anchor periodically so the rotation recurrence cannot drift
            if p % 64 == 0 {
                (s, c) = (p as f64 * freq).sin_cos();
            }
            pe[[p, 2 * i]] = s as f32;
            pe[[p, 2 * i + 1]] = c as f32;
            (s, c) = (s * step_c + c * step_s, c * step_c - s * step_s);
        }
    }
    pe
}

pub fn softmax_rows_inplace(mut x: ArrayViewMut2<f32>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let row = row.as_slice_mut().expect("contiguous rows");
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        for v in row.iter_mut() {
            *v = fast_exp(*v - max);
        }
        let inv = 1.0 / row.iter().sum::<f32>();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}
