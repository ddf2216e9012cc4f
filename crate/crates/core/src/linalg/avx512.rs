//! Single-threaded cache-blocked SGEMM with an AVX-512 register tile.
//!
//! B is packed into depth×column blocks (KC×NC), each a run of NR-wide
//! panels; A is packed per row block into MR-tall panels. Loop nest:
//! depth block → row block (pack A) → column block → NR panel → MR panel
//! → MR×NR micro-kernel, so each B panel stays in L1 across a row block.
//! Panels are zero-padded and partial tiles are stored with masks.

use std::arch::x86_64::*;

const MR: usize = 12;
const NR: usize = 32;
const KC: usize = 256;
const MC: usize = 480;
const NC: usize = 512;

/// Strided operand: element (i, j) lives at `ptr + i·rs + j·cs`.
#[derive(Clone, Copy)]
pub struct Strided<T> {
    pub ptr: T,
    pub rs: isize,
    pub cs: isize,
}

pub fn available() -> bool {
    is_x86_feature_detected!("avx512f")
}

/// Right-hand operand in kernel layout.
#[derive(Debug, Clone)]
pub struct PackedB {
    k: usize,
    n: usize,
    data: Vec<f32>,
}

impl PackedB {
    /// # Safety
    /// Every element of the k×n operand must be readable through `b`.
    pub unsafe fn new(k: usize, n: usize, b: Strided<*const f32>) -> Self {
        let mut data = vec![0.0f32; k * n.next_multiple_of(NR)];
        let mut off = 0;
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            for jc in (0..n).step_by(NC) {
                let nc = NC.min(n - jc);
                let len = kc * nc.next_multiple_of(NR);
                pack_b(
                    kc,
                    nc,
                    b.ptr.offset(pc as isize * b.rs + jc as isize * b.cs),
                    b.rs,
                    b.cs,
                    &mut data[off..off + len],
                );
                off += len;
            }
        }
        Self { k, n, data }
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.k, self.n)
    }
}

/// `c = a·b` (or `c += a·b` when `accumulate`) for an (m×k)·(k×n) product.
///
/// # Safety
/// Every element addressed through the strided operands must be valid, `c`
/// must not alias `a` or `b`, and the CPU must support AVX-512F.
pub unsafe fn sgemm(
    m: usize,
    n: usize,
    k: usize,
    a: Strided<*const f32>,
    b: Strided<*const f32>,
    c: Strided<*mut f32>,
    accumulate: bool,
) {
    sgemm_packed(m, a, &PackedB::new(k, n, b), c, accumulate);
}

/// # Safety
/// As [`sgemm`], with `a` of shape m×k and `c` of shape m×n for `b` of k×n.
pub unsafe fn sgemm_packed(m: usize, a: Strided<*const f32>, b: &PackedB, c: Strided<*mut f32>, accumulate: bool) {
    let (k, n) = (b.k, b.n);
    let mut apack = vec![0.0f32; MC.min(m.next_multiple_of(MR)) * KC.min(k)];
    let mut off = 0;
    for pc in (0..k).step_by(KC) {
        let kc = KC.min(k - pc);
        let overwrite = pc == 0 && !accumulate;
        let block_start = off;
        for ic in (0..m).step_by(MC) {
            let mc = MC.min(m - ic);
            pack_a(
                mc,
                kc,
                a.ptr.offset(ic as isize * a.rs + pc as isize * a.cs),
                a.rs,
                a.cs,
                &mut apack,
            );
            off = block_start;
            for jc in (0..n).step_by(NC) {
                let nc = NC.min(n - jc);
                let block = b.data.as_ptr().add(off);
                off += kc * nc.next_multiple_of(NR);
                for jr in (0..nc).step_by(NR) {
                    let bp = block.add(jr * kc);
                    for ir in (0..mc).step_by(MR) {
                        let ap = apack.as_ptr().add(ir * kc);
                        let cp = c.ptr.offset((ic + ir) as isize * c.rs + (jc + jr) as isize * c.cs);
                        kernel(kc, ap, bp, cp, c.rs, c.cs, MR.min(mc - ir), NR.min(nc - jr), overwrite);
                    }
                }
            }
        }
    }
}

/// Panel `p` holds columns `p·NR..` as `kc` rows of NR contiguous values.
unsafe fn pack_b(kc: usize, nc: usize, b: *const f32, rs: isize, cs: isize, out: &mut [f32]) {
    for (p, j0) in (0..nc).step_by(NR).enumerate() {
        let w = NR.min(nc - j0);
        let panel = &mut out[p * NR * kc..(p + 1) * NR * kc];
        for kk in 0..kc {
            let dst = &mut panel[kk * NR..(kk + 1) * NR];
            let src = b.offset(kk as isize * rs + j0 as isize * cs);
            if cs == 1 {
                dst[..w].copy_from_slice(std::slice::from_raw_parts(src, w));
            } else {
                for (j, d) in dst[..w].iter_mut().enumerate() {
                    *d = *src.offset(j as isize * cs);
                }
            }
            dst[w..].fill(0.0);
        }
    }
}

/// Panel `q` holds rows `q·MR..` as `kc` columns of MR contiguous values.
unsafe fn pack_a(mc: usize, kc: usize, a: *const f32, rs: isize, cs: isize, out: &mut [f32]) {
    for (q, i0) in (0..mc).step_by(MR).enumerate() {
        let h = MR.min(mc - i0);
        let panel = &mut out[q * MR * kc..(q + 1) * MR * kc];
        if h < MR {
            panel.fill(0.0);
        }
        for i in 0..h {
            let row = a.offset((i0 + i) as isize * rs);
            for kk in 0..kc {
                panel[kk * MR + i] = *row.offset(kk as isize * cs);
            }
        }
    }
}

fn lane_mask(valid: usize) -> u16 {
    if valid >= 16 {
        0xffff
    } else {
        ((1u32 << valid) - 1) as u16
    }
}

#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
unsafe fn kernel(
    kc: usize,
    a: *const f32,
    b: *const f32,
    c: *mut f32,
    c_rs: isize,
    c_cs: isize,
    mr: usize,
    nr: usize,
    overwrite: bool,
) {
    let mut acc = [[_mm512_setzero_ps(); 2]; MR];
    for kk in 0..kc {
        let b0 = _mm512_loadu_ps(b.add(kk * NR));
        let b1 = _mm512_loadu_ps(b.add(kk * NR + 16));
        let ak = a.add(kk * MR);
        for (i, row) in acc.iter_mut().enumerate() {
            let ai = _mm512_set1_ps(*ak.add(i));
            row[0] = _mm512_fmadd_ps(ai, b0, row[0]);
            row[1] = _mm512_fmadd_ps(ai, b1, row[1]);
        }
    }
    if c_cs == 1 {
        let m0 = lane_mask(nr);
        let m1 = lane_mask(nr.saturating_sub(16));
        for (i, row) in acc.iter().enumerate().take(mr) {
            let p0 = c.offset(i as isize * c_rs);
            let p1 = p0.wrapping_add(16);
            let (mut v0, mut v1) = (row[0], row[1]);
            if !overwrite {
                v0 = _mm512_add_ps(v0, _mm512_maskz_loadu_ps(m0, p0));
                v1 = _mm512_add_ps(v1, _mm512_maskz_loadu_ps(m1, p1));
            }
            _mm512_mask_storeu_ps(p0, m0, v0);
            _mm512_mask_storeu_ps(p1, m1, v1);
        }
    } else {
        let mut tile = [0.0f32; NR];
        for (i, row) in acc.iter().enumerate().take(mr) {
            _mm512_storeu_ps(tile.as_mut_ptr(), row[0]);
            _mm512_storeu_ps(tile.as_mut_ptr().add(16), row[1]);
            for (j, &t) in tile.iter().enumerate().take(nr) {
                let p = c.offset(i as isize * c_rs + j as isize * c_cs);
                *p = if overwrite { t } else { *p + t };
            }
        }
    }
}
