//! Differentiable kernels.
//!
//! Each op validates shapes, computes the forward value, and records a VJP
//! closure on the tape. Matrix products go through three accumulate-style
//! kernels (`mm_nn`, `mm_nt`, `mm_tn`) with fixed accumulation order, and
//! convolutions lower to im2col + `mm_nn`, so results are deterministic and
//! identical between the parallel and sequential paths.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::runtime;
use crate::tensor::{numel, sigmoid_s, strides, Scalar, Tape, Var};

// ── shape helpers ───────────────────────────────────────────────────────

fn same_shape<S: Scalar>(tape: &Tape<S>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Right-aligned batch broadcast: dims equal, or 1 on either side.
fn broadcast_batch(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Offset of a broadcast operand for a given batch index of the output.
fn broadcast_offset(out_idx: &[usize], dims: &[usize], slice_len: usize) -> usize {
    let rank = out_idx.len();
    let lead = rank - dims.len();
    let st = strides(dims);
    let mut off = 0;
    for (i, &d) in dims.iter().enumerate() {
        if d > 1 {
            off += out_idx[lead + i] * st[i];
        }
    }
    off * slice_len
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0usize; shape.len()];
    for i in (0..shape.len()).rev() {
        idx[i] = flat % shape[i];
        flat /= shape[i];
    }
    idx
}

// ── matrix kernels (all accumulate: out += …) ───────────────────────────

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn mm_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ  (dot products over the shared k axis)
pub(crate) fn mm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            // Four fixed-order accumulators: vectorizes without changing
            // the summation order between runs.
            let mut acc = [S::ZERO; 4];
            let chunks = k / 4;
            for c in 0..chunks {
                let base = c * 4;
                acc[0] = acc[0] + a_row[base] * b_row[base];
                acc[1] = acc[1] + a_row[base + 1] * b_row[base + 1];
                acc[2] = acc[2] + a_row[base + 2] * b_row[base + 2];
                acc[3] = acc[3] + a_row[base + 3] * b_row[base + 3];
            }
            let mut tail = S::ZERO;
            for q in chunks * 4..k {
                tail = tail + a_row[q] * b_row[q];
            }
            out[i * n + j] =
                out[i * n + j] + ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail;
        }
    }
}

/// out[m,n] += a[k,m]ᵀ · b[k,n]
pub(crate) fn mm_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aki * bv;
            }
        }
    }
}

// ── im2col lowering for convolutions ────────────────────────────────────

struct Conv2dGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Conv2dGeom {
    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn out_extent(op: &'static str, name: &str, i: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    let span = i + 2 * p;
    if span < k || (span - k) % s != 0 {
        return Err(Error::invalid(
            op,
            format!("non-integral output extent for {name}: input {i}, kernel {k}, stride {s}, pad {p}"),
        ));
    }
    Ok((span - k) / s + 1)
}

/// Valid output-index range for one kernel tap: positions `o` in
/// `[lo, hi)` have `0 <= o*stride + k - pad < extent`.
#[inline]
fn tap_range(out_len: usize, k: usize, stride: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if extent + pad <= k {
        0
    } else {
        (((extent + pad - k - 1) / stride) + 1).min(out_len)
    };
    (lo.min(out_len), hi.max(lo).min(out_len))
}

/// Copy one kernel tap's input row into a cols row, zero-filling the
/// out-of-range border. Branch-free interior; contiguous when stride is 1.
#[inline]
fn gather_row<S: Scalar>(x_row: &[S], dst: &mut [S], kx: usize, sw: usize, pw: usize, w: usize) {
    let (lo, hi) = tap_range(dst.len(), kx, sw, pw, w);
    dst[..lo].fill(S::ZERO);
    dst[hi..].fill(S::ZERO);
    if hi > lo {
        let start = lo * sw + kx - pw;
        if sw == 1 {
            dst[lo..hi].copy_from_slice(&x_row[start..start + (hi - lo)]);
        } else {
            for (i, d) in dst[lo..hi].iter_mut().enumerate() {
                *d = x_row[start + i * sw];
            }
        }
    }
}

/// Scatter-add one cols row back into the input row (adjoint of
/// [`gather_row`]).
#[inline]
fn scatter_row<S: Scalar>(src: &[S], dx_row: &mut [S], kx: usize, sw: usize, pw: usize, w: usize) {
    let (lo, hi) = tap_range(src.len(), kx, sw, pw, w);
    if hi > lo {
        let start = lo * sw + kx - pw;
        if sw == 1 {
            for (i, &s) in src[lo..hi].iter().enumerate() {
                dx_row[start + i] += s;
            }
        } else {
            for (i, &s) in src[lo..hi].iter().enumerate() {
                dx_row[start + i * sw] += s;
            }
        }
    }
}

fn im2col2d<S: Scalar>(x: &[S], g: &Conv2dGeom, cols: &mut [S]) {
    let p = g.positions();
    for ci in 0..g.cin {
        let x_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(S::ZERO);
                        continue;
                    }
                    let x_row = &x_c[iy as usize * g.w..(iy as usize + 1) * g.w];
                    gather_row(x_row, dst, kx, g.sw, g.pw, g.w);
                }
            }
        }
    }
}

fn col2im2d<S: Scalar>(dcols: &[S], g: &Conv2dGeom, dx: &mut [S]) {
    let p = g.positions();
    for ci in 0..g.cin {
        let dx_c = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &dcols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dx_row = &mut dx_c[iy as usize * g.w..(iy as usize + 1) * g.w];
                    scatter_row(src, dx_row, kx, g.sw, g.pw, g.w);
                }
            }
        }
    }
}

// 3-D analogue; columns are (cin·kt·kh·kw) × (ot·oh·ow).
struct Conv3dGeom {
    cin: usize,
    cout: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    st: usize,
    sh: usize,
    sw: usize,
    pt: usize,
    ph: usize,
    pw: usize,
    ot: usize,
    oh: usize,
    ow: usize,
}

impl Conv3dGeom {
    fn ckk(&self) -> usize {
        self.cin * self.kt * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.ot * self.oh * self.ow
    }
    fn cout(&self) -> usize {
        self.cout
    }
    /// The polyphase fast path covers the visual stem geometry.
    fn is_s122(&self) -> bool {
        self.st == 1 && self.sh == 2 && self.sw == 2
    }
}

// Columns are built one output-time slice at a time (ckk × oh·ow); a full
// im2col of a paper-shape video stem would need hundreds of MB.
fn im2col3d_tslice<S: Scalar>(x: &[S], g: &Conv3dGeom, ot: usize, cols: &mut [S]) {
    let p = g.oh * g.ow;
    let frame = g.h * g.w;
    let vol = g.t * frame;
    for ci in 0..g.cin {
        let x_c = &x[ci * vol..(ci + 1) * vol];
        for kt in 0..g.kt {
            let it = (ot * g.st + kt) as isize - g.pt as isize;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (((ci * g.kt + kt) * g.kh + ky) * g.kw + kx) * p;
                    for oy in 0..g.oh {
                        let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                        let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                        if it < 0 || it >= g.t as isize || iy < 0 || iy >= g.h as isize {
                            dst.fill(S::ZERO);
                            continue;
                        }
                        let x_row = &x_c[it as usize * frame + iy as usize * g.w..][..g.w];
                        gather_row(x_row, dst, kx, g.sw, g.pw, g.w);
                    }
                }
            }
        }
    }
}

// ── polyphase specialization of the stride-(1,2,2) stem conv ───────────
//
// im2col duplicates each input element by kernel_volume/stride_volume
// (~61x for a 5x7x7 stem), so the packing dominates. Splitting the input
// into four spatial phases makes every kernel tap a contiguous axpy.

struct Phases<S> {
    /// data[ry][rx]: (cin, t, hp, wp) row-major
    data: [Vec<S>; 4],
    hp: [usize; 2],
    wp: [usize; 2],
}

fn split_phases<S: Scalar>(x: &[S], cin: usize, t: usize, h: usize, w: usize) -> Phases<S> {
    let hp = [h.div_ceil(2), h / 2];
    let wp = [w.div_ceil(2), w / 2];
    let mut data: [Vec<S>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for ry in 0..2 {
        for rx in 0..2 {
            let mut buf = vec![S::ZERO; cin * t * hp[ry] * wp[rx]];
            for ci in 0..cin {
                for ti in 0..t {
                    for v in 0..hp[ry] {
                        let src = &x[((ci * t + ti) * h + 2 * v + ry) * w..][..w];
                        let dst = &mut buf[((ci * t + ti) * hp[ry] + v) * wp[rx]..][..wp[rx]];
                        for (u, d) in dst.iter_mut().enumerate() {
                            *d = src[2 * u + rx];
                        }
                    }
                }
            }
            data[ry * 2 + rx] = buf;
        }
    }
    Phases { data, hp, wp }
}

/// Tap decomposition: shift s = k - pad = 2q + r with r in {0,1}.
#[inline]
fn phase_of(k: usize, pad: usize) -> (isize, usize) {
    let s = k as isize - pad as isize;
    let r = s.rem_euclid(2);
    ((s - r) / 2, r as usize)
}

#[allow(clippy::too_many_arguments)]
fn conv3d_s122_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    bias: &[S],
    g: &Conv3dGeom,
    out: &mut [S], // (cout, ot, oh, ow), one sample
) {
    let ph = split_phases(x, g.cin, g.t, g.h, g.w);
    let frame_out = g.oh * g.ow;
    for co in 0..g.cout() {
        let b = bias[co];
        for v in &mut out[co * g.ot * frame_out..(co + 1) * g.ot * frame_out] {
            *v = b;
        }
    }
    for ci in 0..g.cin {
        for kt in 0..g.kt {
            let it_off = kt as isize - g.pt as isize;
            let ot_lo = (-it_off).max(0) as usize;
            let ot_hi = ((g.t as isize - it_off).min(g.ot as isize)).max(0) as usize;
            for ky in 0..g.kh {
                let (qy, ry) = phase_of(ky, g.ph);
                let oy_lo = (-qy).max(0) as usize;
                let oy_hi = ((ph.hp[ry] as isize - qy).min(g.oh as isize)).max(0) as usize;
                for kx in 0..g.kw {
                    let (qx, rx) = phase_of(kx, g.pw);
                    let ox_lo = (-qx).max(0) as usize;
                    let ox_hi = ((ph.wp[rx] as isize - qx).min(g.ow as isize)).max(0) as usize;
                    if ox_hi <= ox_lo || oy_hi <= oy_lo {
                        continue;
                    }
                    let buf = &ph.data[ry * 2 + rx];
                    let (hp, wp) = (ph.hp[ry], ph.wp[rx]);
                    let span = ox_hi - ox_lo;
                    for ot in ot_lo..ot_hi {
                        let it = (ot as isize + it_off) as usize;
                        for oy in oy_lo..oy_hi {
                            let v = (oy as isize + qy) as usize;
                            let u0 = (ox_lo as isize + qx) as usize;
                            let x_row = &buf[((ci * g.t + it) * hp + v) * wp + u0..][..span];
                            for co in 0..g.cout() {
                                let wv = w[(((co * g.cin + ci) * g.kt + kt) * g.kh + ky) * g.kw + kx];
                                let o_row = &mut out
                                    [((co * g.ot + ot) * g.oh + oy) * g.ow + ox_lo..][..span];
                                for (o, &xv) in o_row.iter_mut().zip(x_row) {
                                    *o = *o + wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Backward of the polyphase stem conv for one sample: accumulates dW and
/// writes dx (overwritten, not accumulated).
#[allow(clippy::too_many_arguments)]
fn conv3d_s122_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    gy: &[S],
    g: &Conv3dGeom,
    dx: &mut [S],
    dw: &mut [S],
) {
    let ph = split_phases(x, g.cin, g.t, g.h, g.w);
    let mut dph: [Vec<S>; 4] = [
        vec![S::ZERO; ph.data[0].len()],
        vec![S::ZERO; ph.data[1].len()],
        vec![S::ZERO; ph.data[2].len()],
        vec![S::ZERO; ph.data[3].len()],
    ];
    for ci in 0..g.cin {
        for kt in 0..g.kt {
            let it_off = kt as isize - g.pt as isize;
            let ot_lo = (-it_off).max(0) as usize;
            let ot_hi = ((g.t as isize - it_off).min(g.ot as isize)).max(0) as usize;
            for ky in 0..g.kh {
                let (qy, ry) = phase_of(ky, g.ph);
                let oy_lo = (-qy).max(0) as usize;
                let oy_hi = ((ph.hp[ry] as isize - qy).min(g.oh as isize)).max(0) as usize;
                for kx in 0..g.kw {
                    let (qx, rx) = phase_of(kx, g.pw);
                    let ox_lo = (-qx).max(0) as usize;
                    let ox_hi = ((ph.wp[rx] as isize - qx).min(g.ow as isize)).max(0) as usize;
                    if ox_hi <= ox_lo || oy_hi <= oy_lo {
                        continue;
                    }
                    let buf = &ph.data[ry * 2 + rx];
                    let dbuf = &mut dph[ry * 2 + rx];
                    let (hp, wp) = (ph.hp[ry], ph.wp[rx]);
                    let span = ox_hi - ox_lo;
                    for ot in ot_lo..ot_hi {
                        let it = (ot as isize + it_off) as usize;
                        for oy in oy_lo..oy_hi {
                            let v = (oy as isize + qy) as usize;
                            let u0 = (ox_lo as isize + qx) as usize;
                            let row_base = ((ci * g.t + it) * hp + v) * wp + u0;
                            for co in 0..g.cout() {
                                let widx =
                                    (((co * g.cin + ci) * g.kt + kt) * g.kh + ky) * g.kw + kx;
                                let wv = w[widx];
                                let g_row = &gy
                                    [((co * g.ot + ot) * g.oh + oy) * g.ow + ox_lo..][..span];
                                // dх phase accumulation
                                let d_row = &mut dbuf[row_base..row_base + span];
                                for (d, &gv) in d_row.iter_mut().zip(g_row) {
                                    *d = *d + wv * gv;
                                }
                                // dW dot
                                let x_row = &buf[row_base..row_base + span];
                                let mut acc = S::ZERO;
                                for (&xv, &gv) in x_row.iter().zip(g_row) {
                                    acc = acc + xv * gv;
                                }
                                dw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    // un-phase back into dx
    for ry in 0..2 {
        for rx in 0..2 {
            let dbuf = &dph[ry * 2 + rx];
            let (hp, wp) = (ph.hp[ry], ph.wp[rx]);
            for ci in 0..g.cin {
                for ti in 0..g.t {
                    for v in 0..hp {
                        let src = &dbuf[((ci * g.t + ti) * hp + v) * wp..][..wp];
                        let dst = &mut dx[((ci * g.t + ti) * g.h + 2 * v + ry) * g.w..][..g.w];
                        for (u, &s) in src.iter().enumerate() {
                            dst[2 * u + rx] += s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im3d_tslice<S: Scalar>(dcols: &[S], g: &Conv3dGeom, ot: usize, dx: &mut [S]) {
    let p = g.oh * g.ow;
    let frame = g.h * g.w;
    let vol = g.t * frame;
    for ci in 0..g.cin {
        let dx_c = &mut dx[ci * vol..(ci + 1) * vol];
        for kt in 0..g.kt {
            let it = (ot * g.st + kt) as isize - g.pt as isize;
            if it < 0 || it >= g.t as isize {
                continue;
            }
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (((ci * g.kt + kt) * g.kh + ky) * g.kw + kx) * p;
                    for oy in 0..g.oh {
                        let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &dcols[row + oy * g.ow..row + (oy + 1) * g.ow];
                        let dx_row = &mut dx_c[it as usize * frame + iy as usize * g.w..][..g.w];
                        scatter_row(src, dx_row, kx, g.sw, g.pw, g.w);
                    }
                }
            }
        }
    }
}

// ── op implementations ──────────────────────────────────────────────────

impl<S: Scalar> Tape<S> {
    /// Batched matrix product `[.., m, k] × [.., k, n] -> [.., m, n]`.
    /// Leading extents must agree or broadcast from 1 (a rank-2 operand
    /// broadcasts over every batch).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a · bᵀ` where `b` is `[.., n, k]`. The transpose stays
    /// implicit, which keeps attention logits cheap.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let op: &'static str = if b_transposed { "matmul_nt" } else { "matmul" };
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let (m, ka) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (kb, n) = if b_transposed {
            (b_shape[b_shape.len() - 1], b_shape[b_shape.len() - 2])
        } else {
            (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1])
        };
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let k = ka;
        let a_batch = a_shape[..a_shape.len() - 2].to_vec();
        let b_batch = b_shape[..b_shape.len() - 2].to_vec();
        let batch_shape = broadcast_batch(op, &a_batch, &b_batch)?;
        let n_batch = numel(&batch_shape).max(1);

        let a_len = m * k;
        let b_len = k * n;
        let o_len = m * n;
        let mut out_shape = batch_shape.clone();
        out_shape.extend([m, n]);

        let a_val = Arc::clone(&self.node(a.0).value);
        let b_val = Arc::clone(&self.node(b.0).value);

        let offsets: Vec<(usize, usize)> = (0..n_batch)
            .map(|bi| {
                let idx = unravel(bi, &batch_shape);
                (
                    broadcast_offset(&idx, &a_batch, a_len),
                    broadcast_offset(&idx, &b_batch, b_len),
                )
            })
            .collect();

        let mut out = vec![S::ZERO; n_batch * o_len];
        {
            let a_ref = a_val.as_slice();
            let b_ref = b_val.as_slice();
            let offs = &offsets;
            runtime::for_each_chunk_mut(&mut out, o_len, |bi, chunk| {
                let (ao, bo) = offs[bi];
                if b_transposed {
                    mm_nt(&a_ref[ao..ao + a_len], &b_ref[bo..bo + b_len], chunk, m, k, n);
                } else {
                    mm_nn(&a_ref[ao..ao + a_len], &b_ref[bo..bo + b_len], chunk, m, k, n);
                }
            });
        }

        let grad_offsets = offsets;
        let grad = move |gy: &[S], parents: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            let (av, bv) = (parents[0], parents[1]);
            let mut da = vec![S::ZERO; av.len()];
            let mut db = vec![S::ZERO; bv.len()];
            for (bi, &(ao, bo)) in grad_offsets.iter().enumerate() {
                let gy_s = &gy[bi * o_len..(bi + 1) * o_len];
                let a_s = &av[ao..ao + a_len];
                let b_s = &bv[bo..bo + b_len];
                if b_transposed {
                    // y = a·bᵀ: da += gy·b ; db += gyᵀ·a
                    mm_nn(gy_s, b_s, &mut da[ao..ao + a_len], m, n, k);
                    mm_tn(gy_s, a_s, &mut db[bo..bo + b_len], n, m, k);
                } else {
                    // y = a·b: da += gy·bᵀ ; db += aᵀ·gy
                    mm_nt(gy_s, b_s, &mut da[ao..ao + a_len], m, n, k);
                    mm_tn(a_s, gy_s, &mut db[bo..bo + b_len], k, m, n);
                }
            }
            vec![da, db]
        };
        self.push(op, out_shape, out, vec![a.0, b.0], Box::new(grad))
    }

    /// Numerically stable softmax along `axis`: slices shift by their max
    /// before exponentiation and sum to one afterwards.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let line = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = self.value(x).to_vec();
        let mut out = vec![S::ZERO; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * line * inner + i;
                let mut mx = xv[base];
                for l in 1..line {
                    mx = mx.maximum(xv[base + l * inner]);
                }
                let mut sum = S::ZERO;
                for l in 0..line {
                    let e = (xv[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..line {
                    out[base + l * inner] = out[base + l * inner] / sum;
                }
            }
        }
        let grad = move |gy: &[S], _p: &[&[S]], y: &[S]| -> Vec<Vec<S>> {
            let mut dx = vec![S::ZERO; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * line * inner + i;
                    let mut dot = S::ZERO;
                    for l in 0..line {
                        let j = base + l * inner;
                        dot += gy[j] * y[j];
                    }
                    for l in 0..line {
                        let j = base + l * inner;
                        dx[j] = y[j] * (gy[j] - dot);
                    }
                }
            }
            vec![dx]
        };
        self.push("softmax", shape, out, vec![x.0], Box::new(grad))
    }

    /// 2-D cross-correlation: x `[B,Cin,H,W]`, w `[Cout,Cin,kh,kw]`, b `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (batch, cin, h, w_in) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if bs != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vec![cout],
                rhs: bs,
            });
        }
        let oh = out_extent("conv2d", "height", h, kh, stride.0, pad.0)?;
        let ow = out_extent("conv2d", "width", w_in, kw, stride.1, pad.1)?;
        let g = Conv2dGeom {
            cin,
            h,
            w: w_in,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            oh,
            ow,
        };
        let (ckk, p) = (g.ckk(), g.positions());
        let sample_in = cin * h * w_in;
        let sample_out = cout * p;

        let xv = Arc::clone(&self.node(x.0).value);
        let wv = Arc::clone(&self.node(w.0).value);
        let bv = Arc::clone(&self.node(b.0).value);

        let mut out = vec![S::ZERO; batch * sample_out];
        {
            let (xr, wr, br) = (xv.as_slice(), wv.as_slice(), bv.as_slice());
            let g = &g;
            runtime::for_each_chunk_mut(&mut out, sample_out, |bi, chunk| {
                let mut cols = vec![S::ZERO; ckk * p];
                im2col2d(&xr[bi * sample_in..(bi + 1) * sample_in], g, &mut cols);
                mm_nn(wr, &cols, chunk, cout, ckk, p);
                for co in 0..cout {
                    let bias = br[co];
                    for v in &mut chunk[co * p..(co + 1) * p] {
                        *v += bias;
                    }
                }
            });
        }

        let grad = move |gy: &[S], parents: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            let (xr, wr) = (parents[0], parents[1]);
            let mut dx = vec![S::ZERO; xr.len()];
            {
                let g = &g;
                runtime::for_each_chunk_mut(&mut dx, sample_in, |bi, dx_s| {
                    let mut dcols = vec![S::ZERO; ckk * p];
                    mm_tn(wr, &gy[bi * sample_out..(bi + 1) * sample_out], &mut dcols, ckk, cout, p);
                    col2im2d(&dcols, g, dx_s);
                });
            }
            let partial_dw: Vec<Vec<S>> = {
                let g = &g;
                runtime::map_collect(batch, |bi| {
                    let mut cols = vec![S::ZERO; ckk * p];
                    im2col2d(&xr[bi * sample_in..(bi + 1) * sample_in], g, &mut cols);
                    let mut dw = vec![S::ZERO; cout * ckk];
                    mm_nt(&gy[bi * sample_out..(bi + 1) * sample_out], &cols, &mut dw, cout, p, ckk);
                    dw
                })
            };
            let mut dw = vec![S::ZERO; cout * ckk];
            for part in &partial_dw {
                for (d, &v) in dw.iter_mut().zip(part) {
                    *d += v;
                }
            }
            let mut db = vec![S::ZERO; cout];
            for bi in 0..batch {
                for co in 0..cout {
                    let base = bi * sample_out + co * p;
                    for q in 0..p {
                        db[co] += gy[base + q];
                    }
                }
            }
            vec![dx, dw, db]
        };
        self.push(
            "conv2d",
            vec![batch, cout, oh, ow],
            out,
            vec![x.0, w.0, b.0],
            Box::new(grad),
        )
    }

    /// 3-D cross-correlation: x `[B,Cin,T,H,W]`, w `[Cout,Cin,kt,kh,kw]`, b `[Cout]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (batch, cin, t, h, w_in) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (cout, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
        if bs != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                lhs: vec![cout],
                rhs: bs,
            });
        }
        let ot = out_extent("conv3d", "time", t, kt, stride.0, pad.0)?;
        let oh = out_extent("conv3d", "height", h, kh, stride.1, pad.1)?;
        let ow = out_extent("conv3d", "width", w_in, kw, stride.2, pad.2)?;
        let g = Conv3dGeom {
            cin,
            cout,
            t,
            h,
            w: w_in,
            kt,
            kh,
            kw,
            st: stride.0,
            sh: stride.1,
            sw: stride.2,
            pt: pad.0,
            ph: pad.1,
            pw: pad.2,
            ot,
            oh,
            ow,
        };
        let ckk = g.ckk();
        let p_slice = oh * ow; // positions per output-time slice
        let p_all = g.positions();
        let sample_in = cin * t * h * w_in;
        let sample_out = cout * p_all;

        let xv = Arc::clone(&self.node(x.0).value);
        let wv = Arc::clone(&self.node(w.0).value);
        let bv = Arc::clone(&self.node(b.0).value);

        let mut out = vec![S::ZERO; batch * sample_out];
        {
            let (xr, wr, br) = (xv.as_slice(), wv.as_slice(), bv.as_slice());
            let g = &g;
            runtime::for_each_chunk_mut(&mut out, sample_out, |bi, chunk| {
                let x_s = &xr[bi * sample_in..(bi + 1) * sample_in];
                if g.is_s122() {
                    conv3d_s122_forward(x_s, wr, br, g, chunk);
                    return;
                }
                let mut cols = vec![S::ZERO; ckk * p_slice];
                let mut slice_out = vec![S::ZERO; cout * p_slice];
                for oti in 0..ot {
                    im2col3d_tslice(x_s, g, oti, &mut cols);
                    slice_out.fill(S::ZERO);
                    mm_nn(wr, &cols, &mut slice_out, cout, ckk, p_slice);
                    for co in 0..cout {
                        let bias = br[co];
                        let dst = &mut chunk[co * p_all + oti * p_slice..][..p_slice];
                        for (d, &s) in dst.iter_mut().zip(&slice_out[co * p_slice..(co + 1) * p_slice]) {
                            *d = s + bias;
                        }
                    }
                }
            });
        }

        let grad = move |gy: &[S], parents: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            let (xr, wr) = (parents[0], parents[1]);
            let mut dx = vec![S::ZERO; xr.len()];
            let mut dw = vec![S::ZERO; cout * ckk];
            if g.is_s122() {
                // fused dx+dw per sample on the polyphase path
                let per_sample: Vec<(Vec<S>, Vec<S>)> = {
                    let g = &g;
                    runtime::map_collect(batch, |bi| {
                        let x_s = &xr[bi * sample_in..(bi + 1) * sample_in];
                        let gy_s = &gy[bi * sample_out..(bi + 1) * sample_out];
                        let mut dx_s = vec![S::ZERO; sample_in];
                        let mut dw_s = vec![S::ZERO; cout * ckk];
                        conv3d_s122_backward(x_s, wr, gy_s, g, &mut dx_s, &mut dw_s);
                        (dx_s, dw_s)
                    })
                };
                for (bi, (dx_s, dw_s)) in per_sample.into_iter().enumerate() {
                    dx[bi * sample_in..(bi + 1) * sample_in].copy_from_slice(&dx_s);
                    for (d, &v) in dw.iter_mut().zip(&dw_s) {
                        *d += v;
                    }
                }
            } else {
                {
                    let g = &g;
                    runtime::for_each_chunk_mut(&mut dx, sample_in, |bi, dx_s| {
                        let gy_s = &gy[bi * sample_out..(bi + 1) * sample_out];
                        let mut dcols = vec![S::ZERO; ckk * p_slice];
                        let mut gy_slice = vec![S::ZERO; cout * p_slice];
                        for oti in 0..ot {
                            for co in 0..cout {
                                gy_slice[co * p_slice..(co + 1) * p_slice].copy_from_slice(
                                    &gy_s[co * p_all + oti * p_slice..][..p_slice],
                                );
                            }
                            dcols.fill(S::ZERO);
                            mm_tn(wr, &gy_slice, &mut dcols, ckk, cout, p_slice);
                            col2im3d_tslice(&dcols, g, oti, dx_s);
                        }
                    });
                }
                let partial_dw: Vec<Vec<S>> = {
                    let g = &g;
                    runtime::map_collect(batch, |bi| {
                        let x_s = &xr[bi * sample_in..(bi + 1) * sample_in];
                        let gy_s = &gy[bi * sample_out..(bi + 1) * sample_out];
                        let mut cols = vec![S::ZERO; ckk * p_slice];
                        let mut gy_slice = vec![S::ZERO; cout * p_slice];
                        let mut dw = vec![S::ZERO; cout * ckk];
                        for oti in 0..ot {
                            im2col3d_tslice(x_s, g, oti, &mut cols);
                            for co in 0..cout {
                                gy_slice[co * p_slice..(co + 1) * p_slice].copy_from_slice(
                                    &gy_s[co * p_all + oti * p_slice..][..p_slice],
                                );
                            }
                            mm_nt(&gy_slice, &cols, &mut dw, cout, p_slice, ckk);
                        }
                        dw
                    })
                };
                for part in &partial_dw {
                    for (d, &v) in dw.iter_mut().zip(part) {
                        *d += v;
                    }
                }
            }
            let mut db = vec![S::ZERO; cout];
            for bi in 0..batch {
                for co in 0..cout {
                    let base = bi * sample_out + co * p_all;
                    for q in 0..p_all {
                        db[co] += gy[base + q];
                    }
                }
            }
            vec![dx, dw, db]
        };
        self.push(
            "conv3d",
            vec![batch, cout, ot, oh, ow],
            out,
            vec![x.0, w.0, b.0],
            Box::new(grad),
        )
    }

    /// Depthwise temporal convolution: x `[B,C,T]`, w `[C,k]`, b `[C]`,
    /// stride 1, explicit symmetric padding.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_depthwise",
                lhs: xs,
                rhs: ws,
            });
        }
        let (batch, ch, t) = (xs[0], xs[1], xs[2]);
        let k = ws[1];
        if self.shape(b) != [ch] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_depthwise",
                lhs: vec![ch],
                rhs: self.shape(b).to_vec(),
            });
        }
        let ot = out_extent("conv1d_depthwise", "time", t, k, 1, pad)?;
        let xv = self.value(x).to_vec();
        let wv = self.value(w).to_vec();
        let bv = self.value(b).to_vec();
        let mut out = vec![S::ZERO; batch * ch * ot];
        for bi in 0..batch {
            for c in 0..ch {
                let x_c = &xv[(bi * ch + c) * t..(bi * ch + c + 1) * t];
                let w_c = &wv[c * k..(c + 1) * k];
                let o_c = &mut out[(bi * ch + c) * ot..(bi * ch + c + 1) * ot];
                for ou in 0..ot {
                    let mut acc = bv[c];
                    for kk in 0..k {
                        let it = (ou + kk) as isize - pad as isize;
                        if it >= 0 && (it as usize) < t {
                            acc += w_c[kk] * x_c[it as usize];
                        }
                    }
                    o_c[ou] = acc;
                }
            }
        }
        let grad = move |gy: &[S], parents: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            let (xr, wr) = (parents[0], parents[1]);
            let mut dx = vec![S::ZERO; xr.len()];
            let mut dw = vec![S::ZERO; wr.len()];
            let mut db = vec![S::ZERO; ch];
            for bi in 0..batch {
                for c in 0..ch {
                    let x_c = &xr[(bi * ch + c) * t..(bi * ch + c + 1) * t];
                    let w_c = &wr[c * k..(c + 1) * k];
                    let g_c = &gy[(bi * ch + c) * ot..(bi * ch + c + 1) * ot];
                    let dx_c = &mut dx[(bi * ch + c) * t..(bi * ch + c + 1) * t];
                    for ou in 0..ot {
                        let g = g_c[ou];
                        db[c] += g;
                        for kk in 0..k {
                            let it = (ou + kk) as isize - pad as isize;
                            if it >= 0 && (it as usize) < t {
                                dx_c[it as usize] += g * w_c[kk];
                                dw[c * k + kk] += g * x_c[it as usize];
                            }
                        }
                    }
                }
            }
            vec![dx, dw, db]
        };
        self.push(
            "conv1d_depthwise",
            vec![batch, ch, ot],
            out,
            vec![x.0, w.0, b.0],
            Box::new(grad),
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("layer_norm", "rank 0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![d],
                rhs: self.shape(gamma).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be > 0"));
        }
        let rows = numel(&shape) / d;
        let eps_s = S::from_f64(eps);
        let inv_d = S::ONE / S::from_f64(d as f64);
        let xv = self.value(x).to_vec();
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let mut out = vec![S::ZERO; xv.len()];
        let mut inv_std = vec![S::ZERO; rows];
        let mut xhat = vec![S::ZERO; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = S::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let istd = S::ONE / (var + eps_s).sqrt();
            inv_std[r] = istd;
            for i in 0..d {
                let xh = (row[i] - mean) * istd;
                xhat[r * d + i] = xh;
                out[r * d + i] = gv[i] * xh + bv[i];
            }
        }
        let grad = move |gy: &[S], parents: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            let gamma_v = parents[1];
            let mut dx = vec![S::ZERO; rows * d];
            let mut dgamma = vec![S::ZERO; d];
            let mut dbeta = vec![S::ZERO; d];
            for r in 0..rows {
                let gy_r = &gy[r * d..(r + 1) * d];
                let xh_r = &xhat[r * d..(r + 1) * d];
                let istd = inv_std[r];
                let mut mean_dxhat = S::ZERO;
                let mut mean_dxhat_xhat = S::ZERO;
                for i in 0..d {
                    let dxh = gy_r[i] * gamma_v[i];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xh_r[i];
                    dgamma[i] += gy_r[i] * xh_r[i];
                    dbeta[i] += gy_r[i];
                }
                mean_dxhat = mean_dxhat * inv_d;
                mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                for i in 0..d {
                    let dxh = gy_r[i] * gamma_v[i];
                    dx[r * d + i] = istd * (dxh - mean_dxhat - xh_r[i] * mean_dxhat_xhat);
                }
            }
            vec![dx, dgamma, dbeta]
        };
        self.push("layer_norm", shape, out, vec![x.0, gamma.0, beta.0], Box::new(grad))
    }

    // ── elementwise and shape kernels ───────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let grad = |gy: &[S], _p: &[&[S]], _y: &[S]| vec![gy.to_vec(), gy.to_vec()];
        self.push("add", self.shape(a).to_vec(), out, vec![a.0, b.0], Box::new(grad))
    }

    /// `a + b` where `b`'s shape equals a suffix of `a`'s shape and is
    /// repeated over the leading axes (bias vectors, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        if bshape.len() > ashape.len() || ashape[ashape.len() - bshape.len()..] != bshape[..] {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let blen = numel(&bshape);
        let bv = self.value(b).to_vec();
        let out: Vec<S> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % blen])
            .collect();
        let grad = move |gy: &[S], _p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            let mut db = vec![S::ZERO; blen];
            for (i, &g) in gy.iter().enumerate() {
                db[i % blen] += g;
            }
            vec![gy.to_vec(), db]
        };
        self.push("add_broadcast", ashape, out, vec![a.0, b.0], Box::new(grad))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let grad = |gy: &[S], p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            vec![
                gy.iter().zip(p[1]).map(|(&g, &y)| g * y).collect(),
                gy.iter().zip(p[0]).map(|(&g, &x)| g * x).collect(),
            ]
        };
        self.push("mul", self.shape(a).to_vec(), out, vec![a.0, b.0], Box::new(grad))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let cs = S::from_f64(c);
        let out: Vec<S> = self.value(x).iter().map(|&v| v * cs).collect();
        let grad = move |gy: &[S], _p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            vec![gy.iter().map(|&g| g * cs).collect()]
        };
        self.push("scale", self.shape(x).to_vec(), out, vec![x.0], Box::new(grad))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let cs = S::from_f64(c);
        let out: Vec<S> = self.value(x).iter().map(|&v| v + cs).collect();
        let grad = |gy: &[S], _p: &[&[S]], _y: &[S]| vec![gy.to_vec()];
        self.push("add_scalar", self.shape(x).to_vec(), out, vec![x.0], Box::new(grad))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<S> = self
            .value(x)
            .iter()
            .map(|&v| if v > S::ZERO { v } else { S::ZERO })
            .collect();
        let grad = |gy: &[S], p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            vec![gy
                .iter()
                .zip(p[0])
                .map(|(&g, &x)| if x > S::ZERO { g } else { S::ZERO })
                .collect()]
        };
        self.push("relu", self.shape(x).to_vec(), out, vec![x.0], Box::new(grad))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<S> = self.value(x).iter().map(|&v| sigmoid_s(v)).collect();
        let grad = |gy: &[S], _p: &[&[S]], y: &[S]| -> Vec<Vec<S>> {
            vec![gy
                .iter()
                .zip(y)
                .map(|(&g, &s)| g * s * (S::ONE - s))
                .collect()]
        };
        self.push("sigmoid", self.shape(x).to_vec(), out, vec![x.0], Box::new(grad))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out: Vec<S> = self.value(x).iter().map(|&v| v.tanh()).collect();
        let grad = |gy: &[S], _p: &[&[S]], y: &[S]| -> Vec<Vec<S>> {
            vec![gy
                .iter()
                .zip(y)
                .map(|(&g, &t)| g * (S::ONE - t * t))
                .collect()]
        };
        self.push("tanh", self.shape(x).to_vec(), out, vec![x.0], Box::new(grad))
    }

    /// swish(x) = x · sigmoid(x)
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        let out: Vec<S> = self.value(x).iter().map(|&v| v * sigmoid_s(v)).collect();
        let grad = |gy: &[S], p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            vec![gy
                .iter()
                .zip(p[0])
                .map(|(&g, &x)| {
                    let s = sigmoid_s(x);
                    g * (s + x * s * (S::ONE - s))
                })
                .collect()]
        };
        self.push("swish", self.shape(x).to_vec(), out, vec![x.0], Box::new(grad))
    }

    /// Gated linear unit over the last axis: the first half gates through
    /// the sigmoid of the second half.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || d % 2 != 0 {
            return Err(Error::invalid(
                "glu",
                format!("last axis must be even, got shape {shape:?}"),
            ));
        }
        let half = d / 2;
        let rows = numel(&shape) / d;
        let xv = self.value(x);
        let mut out = vec![S::ZERO; rows * half];
        for r in 0..rows {
            for i in 0..half {
                let a = xv[r * d + i];
                let b = xv[r * d + half + i];
                out[r * half + i] = a * sigmoid_s(b);
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = half;
        let grad = move |gy: &[S], p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            let xv = p[0];
            let mut dx = vec![S::ZERO; xv.len()];
            for r in 0..rows {
                for i in 0..half {
                    let a = xv[r * d + i];
                    let b = xv[r * d + half + i];
                    let s = sigmoid_s(b);
                    let g = gy[r * half + i];
                    dx[r * d + i] = g * s;
                    dx[r * d + half + i] = g * a * s * (S::ONE - s);
                }
            }
            vec![dx]
        };
        self.push("glu", out_shape, out, vec![x.0], Box::new(grad))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out: Vec<S> = self.value(x).iter().map(|&v| v.ln()).collect();
        let grad = |gy: &[S], p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            vec![gy.iter().zip(p[0]).map(|(&g, &x)| g / x).collect()]
        };
        self.push("ln", self.shape(x).to_vec(), out, vec![x.0], Box::new(grad))
    }

    /// Clamp to `[lo, hi]`; the gradient passes only through the interior.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        let out: Vec<S> = self
            .value(x)
            .iter()
            .map(|&v| v.maximum(l).minimum(h))
            .collect();
        let grad = move |gy: &[S], p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            vec![gy
                .iter()
                .zip(p[0])
                .map(|(&g, &x)| if x > l && x < h { g } else { S::ZERO })
                .collect()]
        };
        self.push("clamp", self.shape(x).to_vec(), out, vec![x.0], Box::new(grad))
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.shape(vars[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        let mut axis_total = 0usize;
        for &v in vars {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut out = vec![S::ZERO; outer * axis_total * inner];
        let sizes: Vec<usize> = vars.iter().map(|&v| self.shape(v)[axis]).collect();
        let mut base = 0usize;
        for (vi, &v) in vars.iter().enumerate() {
            let val = self.value(v);
            let seg = sizes[vi] * inner;
            for o in 0..outer {
                out[o * axis_total * inner + base..o * axis_total * inner + base + seg]
                    .copy_from_slice(&val[o * seg..(o + 1) * seg]);
            }
            base += seg;
        }
        let grad = move |gy: &[S], p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            let mut grads = Vec::with_capacity(p.len());
            let mut base = 0usize;
            for (vi, pv) in p.iter().enumerate() {
                let seg = sizes[vi] * inner;
                let mut d = vec![S::ZERO; pv.len()];
                for o in 0..outer {
                    d[o * seg..(o + 1) * seg].copy_from_slice(
                        &gy[o * axis_total * inner + base..o * axis_total * inner + base + seg],
                    );
                }
                grads.push(d);
                base += seg;
            }
            grads
        };
        let parents: Vec<usize> = vars.iter().map(|v| v.0).collect();
        self.push("concat", out_shape, out, parents, Box::new(grad))
    }

    /// Materialized contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(
                "slice",
                format!("range {start}+{len} on axis {axis} of shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let xv = self.value(x);
        let mut out = vec![S::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = &xv[(o * full + start) * inner..(o * full + start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let grad = move |gy: &[S], p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            let mut dx = vec![S::ZERO; p[0].len()];
            for o in 0..outer {
                dx[(o * full + start) * inner..(o * full + start + len) * inner]
                    .copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
            }
            vec![dx]
        };
        self.push("slice", out_shape, out, vec![x.0], Box::new(grad))
    }

    /// Materialized axis permutation.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(
                "permute",
                format!("bad permutation {perm:?} for rank {rank}"),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let xv = self.value(x);
        let out = permute_copy(xv, &shape, perm);
        let inv: Vec<usize> = {
            let mut inv = vec![0usize; rank];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            inv
        };
        let out_shape_g = out_shape.clone();
        let grad = move |gy: &[S], _p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            vec![permute_copy(gy, &out_shape_g, &inv)]
        };
        self.push("permute", out_shape, out, vec![x.0], Box::new(grad))
    }

    /// Zero-copy reshape (same element count).
    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        if numel(new_shape) != self.numel(x) {
            return Err(Error::invalid(
                "reshape",
                format!("cannot view {:?} as {new_shape:?}", self.shape(x)),
            ));
        }
        let value = Arc::clone(&self.node(x.0).value);
        let grad = |gy: &[S], _p: &[&[S]], _y: &[S]| vec![gy.to_vec()];
        self.push_alias("reshape", new_shape.to_vec(), value, vec![x.0], Box::new(grad))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut s = S::ZERO;
        for &v in self.value(x) {
            s += v;
        }
        let n = self.numel(x);
        let grad = move |gy: &[S], _p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            vec![vec![gy[0]; n]]
        };
        self.push("sum_all", vec![1], vec![s], vec![x.0], Box::new(grad))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.numel(x);
        let inv = S::ONE / S::from_f64(n as f64);
        let mut s = S::ZERO;
        for &v in self.value(x) {
            s += v;
        }
        let grad = move |gy: &[S], _p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            vec![vec![gy[0] * inv; n]]
        };
        self.push("mean_all", vec![1], vec![s * inv], vec![x.0], Box::new(grad))
    }

    /// Mean along one axis (the axis is removed).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "mean_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let line = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let inv = S::ONE / S::from_f64(line as f64);
        let xv = self.value(x);
        let mut out = vec![S::ZERO; outer * inner];
        for o in 0..outer {
            for l in 0..line {
                let base = (o * line + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv[base + i];
                }
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let grad = move |gy: &[S], p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            let mut dx = vec![S::ZERO; p[0].len()];
            for o in 0..outer {
                for l in 0..line {
                    let base = (o * line + l) * inner;
                    for i in 0..inner {
                        dx[base + i] = gy[o * inner + i] * inv;
                    }
                }
            }
            vec![dx]
        };
        self.push("mean_axis", out_shape, out, vec![x.0], Box::new(grad))
    }

    /// Subtract the mean along `axis` (broadcast back), leaving per-line
    /// deviations. The centering projection is self-adjoint, so the VJP
    /// centers the upstream gradient the same way.
    pub fn center_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "center_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let line = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let inv = S::ONE / S::from_f64(line as f64);
        let center = move |src: &[S]| -> Vec<S> {
            let mut out = src.to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let mut mean = S::ZERO;
                    for l in 0..line {
                        mean += src[(o * line + l) * inner + i];
                    }
                    mean = mean * inv;
                    for l in 0..line {
                        out[(o * line + l) * inner + i] = src[(o * line + l) * inner + i] - mean;
                    }
                }
            }
            out
        };
        let out = center(self.value(x));
        let grad = move |gy: &[S], _p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> { vec![center(gy)] };
        self.push("center_axis", shape, out, vec![x.0], Box::new(grad))
    }

    /// Mean over the two trailing spatial axes: `[.., C, H, W] -> [.., C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::invalid(
                "global_avg_pool",
                format!("need at least 3 axes, got {shape:?}"),
            ));
        }
        let spatial = shape[shape.len() - 2] * shape[shape.len() - 1];
        let chans = numel(&shape) / spatial;
        let inv = S::ONE / S::from_f64(spatial as f64);
        let xv = self.value(x);
        let mut out = vec![S::ZERO; chans];
        for c in 0..chans {
            let mut s = S::ZERO;
            for &v in &xv[c * spatial..(c + 1) * spatial] {
                s += v;
            }
            out[c] = s * inv;
        }
        let out_shape = shape[..shape.len() - 2].to_vec();
        let grad = move |gy: &[S], _p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            let mut dx = vec![S::ZERO; chans * spatial];
            for c in 0..chans {
                let g = gy[c] * inv;
                for v in &mut dx[c * spatial..(c + 1) * spatial] {
                    *v = g;
                }
            }
            vec![dx]
        };
        self.push("global_avg_pool", out_shape, out, vec![x.0], Box::new(grad))
    }

    /// Inverted dropout with a mask drawn deterministically from `seed`.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p={p} outside [0,1)")));
        }
        if p == 0.0 {
            // Nothing to drop; keep the graph free of a no-op mask.
            return self.reshape(x, &self.shape(x).to_vec());
        }
        let keep = 1.0 - p;
        let scale = S::from_f64(1.0 / keep);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mask: Vec<S> = (0..self.numel(x))
            .map(|_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    S::ZERO
                }
            })
            .collect();
        let out: Vec<S> = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let grad = move |gy: &[S], _p: &[&[S]], _y: &[S]| -> Vec<Vec<S>> {
            vec![gy.iter().zip(&mask).map(|(&g, &m)| g * m).collect()]
        };
        self.push("dropout", self.shape(x).to_vec(), out, vec![x.0], Box::new(grad))
    }

    /// Stack equal-shape inputs along a fresh axis at `axis`.
    pub fn stack(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::invalid("stack", "no inputs"));
        }
        let mut unsq = Vec::with_capacity(vars.len());
        let base_shape = self.shape(vars[0]).to_vec();
        for &v in vars {
            same_shape(self, "stack", vars[0], v)?;
            let mut s = base_shape.clone();
            s.insert(axis, 1);
            unsq.push(self.reshape(v, &s)?);
        }
        self.concat(&unsq, axis)
    }
}

pub(crate) fn permute_copy<S: Scalar>(x: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = x.len();
    let mut out = vec![S::ZERO; n];

    // Fast path: the innermost axis stays innermost, so whole rows copy
    // contiguously.
    if rank >= 1 && perm[rank - 1] == rank - 1 && shape[rank - 1] > 1 {
        let row = shape[rank - 1];
        let mut idx = vec![0usize; rank - 1];
        let rows = n / row;
        for r in 0..rows {
            let mut in_off = 0;
            for (d, &i) in idx.iter().enumerate() {
                in_off += i * in_strides[perm[d]];
            }
            out[r * row..(r + 1) * row].copy_from_slice(&x[in_off..in_off + row]);
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        return out;
    }

    // General path: walk output indices in order, map each to its input
    // offset.
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut in_off = 0;
        for (d, &i) in idx.iter().enumerate() {
            in_off += i * in_strides[perm[d]];
        }
        *o = x[in_off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
