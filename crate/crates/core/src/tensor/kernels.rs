//! Forward and backward kernels over flat row-major buffers.
//!
//! Every kernel is a pure function of its inputs. The tape in `tape.rs`
//! owns shape checking and buffer bookkeeping; the functions here assume
//! their preconditions hold.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that keeps the spatial size.
    Same,
    /// No padding; output shrinks by `k - 1`.
    None,
}

thread_local! {
    static CORRUPT_CONV_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Fault injection for the gradient-check suite's own sensitivity test.
/// When enabled on the current thread, conv2d reports a weight gradient
/// scaled by 1.01.
#[doc(hidden)]
pub fn set_conv_backward_fault(enabled: bool) {
    CORRUPT_CONV_BACKWARD.with(|c| c.set(enabled));
}

pub fn conv_output_hw(h: usize, w: usize, k: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Same => (h, w),
        Padding::None => (h + 1 - k, w + 1 - k),
    }
}

/// Half-open ranges of output coordinates whose tap `kk` (offset
/// `kk - pad`) lands inside `[0, n_in)`.
#[inline]
fn tap_range(n_out: usize, n_in: usize, kk: usize, pad: usize) -> (usize, usize) {
    // source = out + kk - pad
    let lo = pad.saturating_sub(kk);
    let hi = (n_in + pad).saturating_sub(kk).min(n_out);
    (lo, hi.max(lo))
}

pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(in_dims: [usize; 4], out_c: usize, k: usize, padding: Padding) -> Self {
        let [batch, in_c, h, w] = in_dims;
        let (oh, ow) = conv_output_hw(h, w, k, padding);
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::None => 0,
        };
        Self { batch, in_c, out_c, h, w, k, oh, ow, pad }
    }
}

/// Output rows per im2col tile, chosen so a tile's column matrix stays
/// cache-resident.
fn tile_rows(g: &ConvGeom) -> usize {
    const TILE_ELEMS: usize = 1 << 15;
    (TILE_ELEMS / (g.taps() * g.ow).max(1)).clamp(1, g.oh)
}

/// Unfolds output rows `y0..y1` of one batch item into a
/// `[in_c·k·k, (y1−y0)·ow]` column matrix.
fn im2col(g: &ConvGeom, src: &[f64], (y0, y1): (usize, usize), col: &mut [f64]) {
    let plane_in = g.h * g.w;
    let n = (y1 - y0) * g.ow;
    for ic in 0..g.in_c {
        let s = &src[ic * plane_in..][..plane_in];
        for ky in 0..g.k {
            let (ty0, ty1) = tap_range(g.oh, g.h, ky, g.pad);
            for kx in 0..g.k {
                let (x0, x1) = tap_range(g.ow, g.w, kx, g.pad);
                let row = &mut col[((ic * g.k + ky) * g.k + kx) * n..][..n];
                let (v0, v1) = (y0.max(ty0), y1.min(ty1).max(y0.max(ty0)));
                row[..(v0 - y0) * g.ow].fill(0.0);
                row[(v1 - y0) * g.ow..].fill(0.0);
                for y in v0..v1 {
                    let sy = y + ky - g.pad;
                    let sx0 = x0 + kx - g.pad;
                    let r = (y - y0) * g.ow;
                    row[r..r + x0].fill(0.0);
                    row[r + x0..r + x1].copy_from_slice(&s[sy * g.w + sx0..sy * g.w + sx0 + (x1 - x0)]);
                    row[r + x1..r + g.ow].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column tile back into an image.
fn col2im(g: &ConvGeom, col: &[f64], (y0, y1): (usize, usize), dst: &mut [f64]) {
    let plane_in = g.h * g.w;
    let n = (y1 - y0) * g.ow;
    for ic in 0..g.in_c {
        let d = &mut dst[ic * plane_in..][..plane_in];
        for ky in 0..g.k {
            let (ty0, ty1) = tap_range(g.oh, g.h, ky, g.pad);
            for kx in 0..g.k {
                let (x0, x1) = tap_range(g.ow, g.w, kx, g.pad);
                let row = &col[((ic * g.k + ky) * g.k + kx) * n..][..n];
                for y in y0.max(ty0)..y1.min(ty1) {
                    let sy = y + ky - g.pad;
                    let sx0 = x0 + kx - g.pad;
                    let r = (y - y0) * g.ow;
                    let drow = &mut d[sy * g.w + sx0..sy * g.w + sx0 + (x1 - x0)];
                    for (dv, cv) in drow.iter_mut().zip(&row[r + x0..r + x1]) {
                        *dv += cv;
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    fn taps(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product with explicit
/// `(row, column)` strides; `c` has row stride `rsc`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa || k == 0);
    assert!(b.len() > (k.max(1) - 1) * rsb + (n - 1) * csb || k == 0);
    assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

pub fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (plane_in, plane_out, taps) = (g.h * g.w, g.oh * g.ow, g.taps());
    let mut out = vec![0.0; g.batch * g.out_c * plane_out];
    let rows = tile_rows(g);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; taps * rows * g.ow] };
    for b in 0..g.batch {
        let src = &input[b * g.in_c * plane_in..][..g.in_c * plane_in];
        let o = &mut out[b * g.out_c * plane_out..][..g.out_c * plane_out];
        if g.is_pointwise() {
            gemm((g.out_c, taps, plane_out), weight, (taps, 1), src, (plane_out, 1), 0.0, o, plane_out);
        } else {
            for y0 in (0..g.oh).step_by(rows) {
                let y1 = (y0 + rows).min(g.oh);
                let n = (y1 - y0) * g.ow;
                im2col(g, src, (y0, y1), &mut col);
                gemm((g.out_c, taps, n), weight, (taps, 1), &col, (n, 1), 0.0, &mut o[y0 * g.ow..], plane_out);
            }
        }
        if let Some(bias) = bias {
            for (oc, row) in o.chunks_exact_mut(plane_out).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[oc]);
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (plane_in, plane_out, taps) = (g.h * g.w, g.oh * g.ow, g.taps());
    let mut gin = vec![0.0; input.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; g.out_c];
    let rows = tile_rows(g);
    let pw = g.is_pointwise();
    let mut col = if pw { Vec::new() } else { vec![0.0; taps * rows * g.ow] };
    let mut gcol = col.clone();
    for b in 0..g.batch {
        let src = &input[b * g.in_c * plane_in..][..g.in_c * plane_in];
        let go = &grad_out[b * g.out_c * plane_out..][..g.out_c * plane_out];
        for (oc, row) in go.chunks_exact(plane_out).enumerate() {
            gb[oc] += row.iter().sum::<f64>();
        }
        let gsrc = &mut gin[b * g.in_c * plane_in..][..g.in_c * plane_in];
        if pw {
            // gW += gout · inputᵀ ; gin = Wᵀ · gout
            gemm((g.out_c, plane_out, taps), go, (plane_out, 1), src, (1, plane_out), 1.0, &mut gw, taps);
            gemm((taps, g.out_c, plane_out), weight, (1, taps), go, (plane_out, 1), 0.0, gsrc, plane_out);
            continue;
        }
        for y0 in (0..g.oh).step_by(rows) {
            let y1 = (y0 + rows).min(g.oh);
            let n = (y1 - y0) * g.ow;
            let got = &go[y0 * g.ow..];
            im2col(g, src, (y0, y1), &mut col);
            gemm((g.out_c, n, taps), got, (plane_out, 1), &col, (1, n), 1.0, &mut gw, taps);
            gemm((taps, g.out_c, n), weight, (1, taps), got, (plane_out, 1), 0.0, &mut gcol, n);
            col2im(g, &gcol, (y0, y1), gsrc);
        }
    }
    if CORRUPT_CONV_BACKWARD.with(Cell::get) {
        gw.iter_mut().for_each(|v| *v *= 1.01);
    }
    (gin, gw, gb)
}

/// Window `[start, end)` of output index `i` when pooling `n_in` to `n_out`.
#[inline]
pub fn pool_window(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let start = i * n_in / n_out;
    let end = ((i + 1) * n_in).div_ceil(n_out);
    (start, end)
}

/// Adaptive max pooling. Returns the pooled values and, for each output
/// element, the flat input index of the first row-major maximum.
pub fn adaptive_max_pool_forward(
    dims: [usize; 4],
    input: &[f64],
    th: usize,
    tw: usize,
) -> (Vec<f64>, Vec<usize>) {
    let [b, c, h, w] = dims;
    let mut out = Vec::with_capacity(b * c * th * tw);
    let mut arg = Vec::with_capacity(b * c * th * tw);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..th {
            let (y0, y1) = pool_window(oy, h, th);
            for ox in 0..tw {
                let (x0, x1) = pool_window(ox, w, tw);
                let mut best = base + y0 * w + x0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let idx = base + y * w + x;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn adaptive_max_pool_backward(input_len: usize, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let mut gin = vec![0.0; input_len];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        gin[idx] += g;
    }
    gin
}

/// One axis of a half-pixel-center bilinear resample: for every output
/// coordinate, the two source taps and the weight of the upper tap.
#[derive(Debug, Clone)]
pub struct LinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LinearTaps {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let max = (n_in - 1) as f64;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut frac = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let l = src.floor() as usize;
            lo.push(l);
            hi.push((l + 1).min(n_in - 1));
            frac.push(src - l as f64);
        }
        Self { lo, hi, frac }
    }
}

pub fn bilinear_forward(dims: [usize; 4], input: &[f64], th: usize, tw: usize) -> Vec<f64> {
    let [b, c, h, w] = dims;
    let ty = LinearTaps::new(h, th);
    let tx = LinearTaps::new(w, tw);
    let mut out = Vec::with_capacity(b * c * th * tw);
    // Horizontal pass into `rows`, then vertical; the same products as the
    // direct two-dimensional form.
    let mut rows = vec![0.0; h * tw];
    for plane in 0..b * c {
        let src = &input[plane * h * w..][..h * w];
        for (dst, s) in rows.chunks_exact_mut(tw).zip(src.chunks_exact(w)) {
            for (ox, d) in dst.iter_mut().enumerate() {
                let fx = tx.frac[ox];
                *d = s[tx.lo[ox]] * (1.0 - fx) + s[tx.hi[ox]] * fx;
            }
        }
        for oy in 0..th {
            let fy = ty.frac[oy];
            let top = &rows[ty.lo[oy] * tw..][..tw];
            let bot = &rows[ty.hi[oy] * tw..][..tw];
            out.extend(top.iter().zip(bot).map(|(t, b)| t * (1.0 - fy) + b * fy));
        }
    }
    out
}

pub fn bilinear_backward(dims: [usize; 4], th: usize, tw: usize, grad_out: &[f64]) -> Vec<f64> {
    let [b, c, h, w] = dims;
    let ty = LinearTaps::new(h, th);
    let tx = LinearTaps::new(w, tw);
    let mut gin = vec![0.0; b * c * h * w];
    let mut rows = vec![0.0; h * tw];
    for plane in 0..b * c {
        let gsrc = &mut gin[plane * h * w..][..h * w];
        let go = &grad_out[plane * th * tw..][..th * tw];
        rows.fill(0.0);
        for (oy, g) in go.chunks_exact(tw).enumerate() {
            let fy = ty.frac[oy];
            let (r0, r1) = (ty.lo[oy] * tw, ty.hi[oy] * tw);
            for (ox, &gv) in g.iter().enumerate() {
                rows[r0 + ox] += gv * (1.0 - fy);
                rows[r1 + ox] += gv * fy;
            }
        }
        for (dst, r) in gsrc.chunks_exact_mut(w).zip(rows.chunks_exact(tw)) {
            for (ox, &gv) in r.iter().enumerate() {
                let fx = tx.frac[ox];
                dst[tx.lo[ox]] += gv * (1.0 - fx);
                dst[tx.hi[ox]] += gv * fx;
            }
        }
    }
    gin
}

/// RMS normalization across channels at every `(batch, y, x)`.
/// Returns the output and the per-position reciprocal RMS.
pub fn rmsnorm_forward(dims: [usize; 4], input: &[f64], gain: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let mut out = vec![0.0; input.len()];
    let mut inv = vec![0.0; b * plane];
    for bi in 0..b {
        let base = bi * c * plane;
        let r = &mut inv[bi * plane..][..plane];
        for ch in 0..c {
            for (s, v) in r.iter_mut().zip(&input[base + ch * plane..][..plane]) {
                *s += v * v;
            }
        }
        for s in r.iter_mut() {
            let ms = *s / c as f64 + eps;
            *s = if ms > 0.0 { 1.0 / ms.sqrt() } else { 0.0 };
        }
        for ch in 0..c {
            let off = base + ch * plane;
            for ((o, x), rv) in out[off..][..plane].iter_mut().zip(&input[off..][..plane]).zip(r.iter()) {
                *o = x * rv * gain[ch];
            }
        }
    }
    (out, inv)
}

/// Returns `(grad_input, grad_gain)`.
pub fn rmsnorm_backward(
    dims: [usize; 4],
    input: &[f64],
    gain: &[f64],
    inv_rms: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let mut gin = vec![0.0; input.len()];
    let mut gg = vec![0.0; c];
    let mut coef = vec![0.0; plane];
    for bi in 0..b {
        let base = bi * c * plane;
        let r = &inv_rms[bi * plane..][..plane];
        // out_c = x_c r g_c ; dr/dx_k = -r^3 x_k / C
        coef.fill(0.0);
        for ch in 0..c {
            let off = base + ch * plane;
            let (go, x) = (&grad_out[off..][..plane], &input[off..][..plane]);
            let mut acc = 0.0;
            for p in 0..plane {
                acc += go[p] * x[p] * r[p];
                coef[p] += go[p] * gain[ch] * x[p];
            }
            gg[ch] += acc;
        }
        for (k, rv) in coef.iter_mut().zip(r) {
            *k *= rv * rv * rv / c as f64;
        }
        for ch in 0..c {
            let off = base + ch * plane;
            let (go, x) = (&grad_out[off..][..plane], &input[off..][..plane]);
            for (p, gi) in gin[off..][..plane].iter_mut().enumerate() {
                *gi = go[p] * gain[ch] * r[p] - coef[p] * x[p];
            }
        }
    }
    (gin, gg)
}

/// Fused `channel_dot(rmsnorm(x, gain), query)`: per-position logits
/// `r·Σ_c q_c g_c x_c` without materializing the normalized keys.
/// Returns `(logits [N·H·W], inv_rms, raw dot Σ_c q_c g_c x_c)`.
pub fn rms_query_forward(dims: [usize; 4], input: &[f64], gain: &[f64], query: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut inv = vec![0.0; n * plane];
    let mut dot = vec![0.0; n * plane];
    for e in 0..n {
        let r = &mut inv[e * plane..][..plane];
        let d = &mut dot[e * plane..][..plane];
        for ch in 0..c {
            let qg = query[ch] * gain[ch];
            for ((s, dv), x) in r.iter_mut().zip(d.iter_mut()).zip(&input[(e * c + ch) * plane..][..plane]) {
                *s += x * x;
                *dv += qg * x;
            }
        }
        for s in r.iter_mut() {
            let ms = *s / c as f64 + eps;
            *s = if ms > 0.0 { 1.0 / ms.sqrt() } else { 0.0 };
        }
    }
    let logits = inv.iter().zip(&dot).map(|(r, d)| r * d).collect();
    (logits, inv, dot)
}

/// Returns `(grad_input, grad_gain, grad_query)`.
pub fn rms_query_backward(
    dims: [usize; 4],
    input: &[f64],
    gain: &[f64],
    query: &[f64],
    inv_rms: &[f64],
    dot: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut gin = vec![0.0; input.len()];
    let mut s = vec![0.0; c];
    let mut coef = vec![0.0; plane];
    let mut scaled = vec![0.0; plane];
    for e in 0..n {
        let (r, d, gl) = (&inv_rms[e * plane..][..plane], &dot[e * plane..][..plane], &grad_out[e * plane..][..plane]);
        for p in 0..plane {
            scaled[p] = gl[p] * r[p];
            coef[p] = gl[p] * r[p] * r[p] * r[p] * d[p] / c as f64;
        }
        for ch in 0..c {
            let off = (e * c + ch) * plane;
            let qg = query[ch] * gain[ch];
            let x = &input[off..][..plane];
            let mut acc = 0.0;
            for (p, gi) in gin[off..][..plane].iter_mut().enumerate() {
                acc += scaled[p] * x[p];
                *gi = scaled[p] * qg - coef[p] * x[p];
            }
            s[ch] += acc;
        }
    }
    let gg = s.iter().zip(query).map(|(s, q)| s * q).collect();
    let gq = s.iter().zip(gain).map(|(s, g)| s * g).collect();
    (gin, gg, gq)
}

/// `(outer, axis_len, inner)` strides for reducing along `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward(shape: &[usize], axis: usize, input: &[f64]) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; input.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..n {
                m = m.max(input[at(k)]);
            }
            let mut z = 0.0;
            for k in 0..n {
                let e = (input[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[at(k)] /= z;
            }
        }
    }
    out
}

pub fn softmax_backward(shape: &[usize], axis: usize, output: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut gin = vec![0.0; output.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot: f64 = (0..n).map(|k| output[at(k)] * grad_out[at(k)]).sum();
            for k in 0..n {
                gin[at(k)] = output[at(k)] * (grad_out[at(k)] - dot);
            }
        }
    }
    gin
}

/// `⟨query, x[n, :, y, x]⟩` for every entry and position: `[N, C, H, W] -> [N, 1, H, W]`.
pub fn channel_dot_forward(dims: [usize; 4], input: &[f64], query: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut out = vec![0.0; n * plane];
    for e in 0..n {
        let o = &mut out[e * plane..][..plane];
        for (ch, &q) in query.iter().enumerate().take(c) {
            let src = &input[(e * c + ch) * plane..][..plane];
            for (ov, sv) in o.iter_mut().zip(src) {
                *ov += q * sv;
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_query)`.
pub fn channel_dot_backward(dims: [usize; 4], input: &[f64], query: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut gin = vec![0.0; input.len()];
    let mut gq = vec![0.0; c];
    for e in 0..n {
        let go = &grad_out[e * plane..][..plane];
        for ch in 0..c {
            let off = (e * c + ch) * plane;
            let src = &input[off..][..plane];
            gq[ch] += go.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
            for (gi, gv) in gin[off..][..plane].iter_mut().zip(go) {
                *gi = query[ch] * gv;
            }
        }
    }
    (gin, gq)
}

/// `out[b, c, p] = Σ_n weights[n, b, p] · values[n·B + b, c, p]`.
///
/// `values` is a batch-axis stack of `entries` feature maps `[B, C, H, W]`;
/// `weights` is `[entries, B, H, W]`.
pub fn weighted_sum_forward(entries: usize, dims: [usize; 4], values: &[f64], weights: &[f64]) -> Vec<f64> {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let mut out = vec![0.0; b * c * plane];
    for n in 0..entries {
        for bi in 0..b {
            let wrow = &weights[(n * b + bi) * plane..][..plane];
            for ch in 0..c {
                let v = &values[((n * b + bi) * c + ch) * plane..][..plane];
                let o = &mut out[(bi * c + ch) * plane..][..plane];
                for ((ov, vv), wv) in o.iter_mut().zip(v).zip(wrow) {
                    *ov += wv * vv;
                }
            }
        }
    }
    out
}

/// Returns `(grad_values, grad_weights)`.
pub fn weighted_sum_backward(
    entries: usize,
    dims: [usize; 4],
    values: &[f64],
    weights: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let mut gv = vec![0.0; values.len()];
    let mut gw = vec![0.0; weights.len()];
    for n in 0..entries {
        for bi in 0..b {
            let woff = (n * b + bi) * plane;
            for ch in 0..c {
                let voff = ((n * b + bi) * c + ch) * plane;
                let go = &grad_out[(bi * c + ch) * plane..][..plane];
                for p in 0..plane {
                    gv[voff + p] = weights[woff + p] * go[p];
                    gw[woff + p] += values[voff + p] * go[p];
                }
            }
        }
    }
    (gv, gw)
}

/// Mean per-pixel cross-entropy of softmaxed `[B, K, H, W]` logits against
/// integer labels `[B, H, W]`. Returns `(loss, softmax probabilities)`.
pub fn cross_entropy_forward(dims: [usize; 4], logits: &[f64], labels: &[usize]) -> (f64, Vec<f64>) {
    let [b, k, h, w] = dims;
    let plane = h * w;
    let probs = softmax_forward(&[b, k, h, w], 1, logits);
    let mut total = 0.0;
    for bi in 0..b {
        for p in 0..plane {
            let cls = labels[bi * plane + p];
            // log-softmax directly for stability
            let at = |ch: usize| (bi * k + ch) * plane + p;
            let m = (0..k).map(|ch| logits[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..k).map(|ch| (logits[at(ch)] - m).exp()).sum::<f64>().ln();
            total += lse - logits[at(cls)];
        }
    }
    (total / (b * plane) as f64, probs)
}

pub fn cross_entropy_backward(dims: [usize; 4], probs: &[f64], labels: &[usize], grad_out: f64) -> Vec<f64> {
    let [b, k, h, w] = dims;
    let plane = h * w;
    let scale = grad_out / (b * plane) as f64;
    let mut gin: Vec<f64> = probs.iter().map(|p| p * scale).collect();
    for bi in 0..b {
        for p in 0..plane {
            let cls = labels[bi * plane + p];
            gin[(bi * k + cls) * plane + p] -= scale;
        }
    }
    gin
}

/// Per-class sums used by the soft Dice loss.
pub struct DiceSums {
    pub intersection: Vec<f64>,
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
}

/// `1 − mean_c (2·Σ p g + s) / (Σ p + Σ g + s)` over the whole batch,
/// with `p` the channel softmax of `logits` and `g` the one-hot labels.
pub fn soft_dice_forward(
    dims: [usize; 4],
    logits: &[f64],
    labels: &[usize],
    smooth: f64,
) -> (f64, Vec<f64>, DiceSums) {
    let [b, k, h, w] = dims;
    let plane = h * w;
    let probs = softmax_forward(&[b, k, h, w], 1, logits);
    let mut sums = DiceSums { intersection: vec![0.0; k], pred: vec![0.0; k], truth: vec![0.0; k] };
    for bi in 0..b {
        for ch in 0..k {
            let pr = &probs[(bi * k + ch) * plane..][..plane];
            sums.pred[ch] += pr.iter().sum::<f64>();
            for (p, &v) in pr.iter().enumerate() {
                if labels[bi * plane + p] == ch {
                    sums.intersection[ch] += v;
                    sums.truth[ch] += 1.0;
                }
            }
        }
    }
    let mean_dice = (0..k)
        .map(|ch| (2.0 * sums.intersection[ch] + smooth) / (sums.pred[ch] + sums.truth[ch] + smooth))
        .sum::<f64>()
        / k as f64;
    (1.0 - mean_dice, probs, sums)
}

pub fn soft_dice_backward(
    dims: [usize; 4],
    probs: &[f64],
    labels: &[usize],
    sums: &DiceSums,
    smooth: f64,
    grad_out: f64,
) -> Vec<f64> {
    let [b, k, h, w] = dims;
    let plane = h * w;
    // dL/dp_{c,i} = -(1/K) · (2 g_i D_c − N_c) / D_c², N = 2I + s, D = P + G + s
    let coef: Vec<(f64, f64)> = (0..k)
        .map(|ch| {
            let num = 2.0 * sums.intersection[ch] + smooth;
            let den = sums.pred[ch] + sums.truth[ch] + smooth;
            (2.0 / den, num / (den * den))
        })
        .collect();
    let scale = -grad_out / k as f64;
    let mut gp = vec![0.0; probs.len()];
    for bi in 0..b {
        for ch in 0..k {
            let (a, c0) = coef[ch];
            for p in 0..plane {
                let g = if labels[bi * plane + p] == ch { 1.0 } else { 0.0 };
                gp[(bi * k + ch) * plane + p] = scale * (a * g - c0);
            }
        }
    }
    softmax_backward(&[b, k, h, w], 1, probs, &gp)
}

#[cfg(test)]
mod direct {
    //! Loop-nest convolution used as a reference for the GEMM path.
    use super::{tap_range, ConvGeom};

    pub(super) fn direct_conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (plane_in, plane_out) = (g.h * g.w, g.oh * g.ow);
        let mut out = vec![0.0; g.batch * g.out_c * plane_out];
        for b in 0..g.batch {
            for oc in 0..g.out_c {
                let o = &mut out[(b * g.out_c + oc) * plane_out..][..plane_out];
                if let Some(bias) = bias {
                    o.fill(bias[oc]);
                }
                for ic in 0..g.in_c {
                    let src = &input[(b * g.in_c + ic) * plane_in..][..plane_in];
                    let wk = &weight[(oc * g.in_c + ic) * g.k * g.k..][..g.k * g.k];
                    for ky in 0..g.k {
                        let (y0, y1) = tap_range(g.oh, g.h, ky, g.pad);
                        for kx in 0..g.k {
                            let wv = wk[ky * g.k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (x0, x1) = tap_range(g.ow, g.w, kx, g.pad);
                            for y in y0..y1 {
                                let sy = y + ky - g.pad;
                                let sx0 = x0 + kx - g.pad;
                                let orow = &mut o[y * g.ow + x0..y * g.ow + x1];
                                let srow = &src[sy * g.w + sx0..sy * g.w + sx0 + (x1 - x0)];
                                for (ov, sv) in orow.iter_mut().zip(srow) {
                                    *ov += wv * sv;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`.
    pub(super) fn direct_conv_backward(
        g: &ConvGeom,
        input: &[f64],
        weight: &[f64],
        grad_out: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (plane_in, plane_out) = (g.h * g.w, g.oh * g.ow);
        let mut gin = vec![0.0; input.len()];
        let mut gw = vec![0.0; weight.len()];
        let mut gb = vec![0.0; g.out_c];
        for b in 0..g.batch {
            for oc in 0..g.out_c {
                let go = &grad_out[(b * g.out_c + oc) * plane_out..][..plane_out];
                gb[oc] += go.iter().sum::<f64>();
                for ic in 0..g.in_c {
                    let src = &input[(b * g.in_c + ic) * plane_in..][..plane_in];
                    let gsrc = &mut gin[(b * g.in_c + ic) * plane_in..][..plane_in];
                    let wbase = (oc * g.in_c + ic) * g.k * g.k;
                    for ky in 0..g.k {
                        let (y0, y1) = tap_range(g.oh, g.h, ky, g.pad);
                        for kx in 0..g.k {
                            let wv = weight[wbase + ky * g.k + kx];
                            let (x0, x1) = tap_range(g.ow, g.w, kx, g.pad);
                            let n = x1 - x0;
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let sy = y + ky - g.pad;
                                let sx0 = x0 + kx - g.pad;
                                let grow = &go[y * g.ow + x0..y * g.ow + x1];
                                let srow = &src[sy * g.w + sx0..sy * g.w + sx0 + n];
                                acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                                let girow = &mut gsrc[sy * g.w + sx0..sy * g.w + sx0 + n];
                                for (gi, gv) in girow.iter_mut().zip(grow) {
                                    *gi += wv * gv;
                                }
                            }
                            gw[wbase + ky * g.k + kx] += acc;
                        }
                    }
                }
            }
        }
        (gin, gw, gb)
    }
}
