//! Forward and backward kernels on raw row-major slices.
//!
//! These are shared by the autodiff graph and by the oracle-free inference
//! helpers. Every backward function is the exact adjoint of its forward.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::gate::{segments, ChannelGate};
use crate::error::{Error, Result};

// ── convolution ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub c_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvDims {
    pub fn t_out(&self) -> usize {
        (self.t_in - self.kernel) / self.stride + 1
    }

    pub fn t_out_transposed(&self) -> usize {
        (self.t_in - 1) * self.stride + self.kernel
    }
}

/// `y[o,t] = b[o] + Σ_{c,k} w[o,c,k]·x[c, t·S + k]` for active rows; inactive
/// rows are exactly zero.
pub fn conv1d_forward(
    d: ConvDims,
    x: &[f64],
    w: &[f64],
    b: &[f64],
    out_gate: Option<&ChannelGate>,
    in_gate: Option<&ChannelGate>,
) -> Vec<f64> {
    let t_out = d.t_out();
    let mut y = vec![0.0; d.c_out * t_out];
    for seg in segments(t_out, d.c_out, d.c_in, out_gate, in_gate) {
        for &o in &seg.rows {
            let yrow = &mut y[o * t_out + seg.start..o * t_out + seg.end];
            yrow.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..seg.in_count {
                let xrow = &x[c * d.t_in..(c + 1) * d.t_in];
                let wk = &w[(o * d.c_in + c) * d.kernel..(o * d.c_in + c + 1) * d.kernel];
                if d.stride == 1 {
                    for (kk, wv) in wk.iter().enumerate() {
                        let base = seg.start + kk;
                        let xs = &xrow[base..base + yrow.len()];
                        for (yv, xv) in yrow.iter_mut().zip(xs) {
                            *yv += wv * xv;
                        }
                    }
                } else {
                    for (i, yv) in yrow.iter_mut().enumerate() {
                        let xs = &xrow[(seg.start + i) * d.stride..][..d.kernel];
                        *yv += wk.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
    y
}

/// Accumulates the adjoint of [`conv1d_forward`] into `dx`, `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    d: ConvDims,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    out_gate: Option<&ChannelGate>,
    in_gate: Option<&ChannelGate>,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let t_out = d.t_out();
    for seg in segments(t_out, d.c_out, d.c_in, out_gate, in_gate) {
        for &o in &seg.rows {
            let dyrow = &dy[o * t_out + seg.start..o * t_out + seg.end];
            if let Some(db) = db.as_deref_mut() {
                db[o] += dyrow.iter().sum::<f64>();
            }
            for c in 0..seg.in_count {
                let w0 = (o * d.c_in + c) * d.kernel;
                let base = c * d.t_in + seg.start * d.stride;
                if d.stride == 1 {
                    for kk in 0..d.kernel {
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[w0 + kk] += dyrow.iter().zip(&x[base + kk..]).map(|(g, v)| g * v).sum::<f64>();
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let wv = w[w0 + kk];
                            for (g, v) in dyrow.iter().zip(dx[base + kk..].iter_mut()) {
                                *v += wv * g;
                            }
                        }
                    }
                } else {
                    let wk = &w[w0..w0 + d.kernel];
                    for (i, g) in dyrow.iter().enumerate() {
                        let at = base + i * d.stride;
                        if let Some(dw) = dw.as_deref_mut() {
                            for (a, v) in dw[w0..w0 + d.kernel].iter_mut().zip(&x[at..at + d.kernel]) {
                                *a += g * v;
                            }
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            for (v, wv) in dx[at..at + d.kernel].iter_mut().zip(wk) {
                                *v += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution with weights `[C_in, C_out, K]`:
/// `y[o, t·S + k] += w[c,o,k]·x[c,t]`, plus `b[o]` everywhere. The input gate
/// is indexed by input frame.
pub fn conv_transpose1d_forward(
    d: ConvDims,
    x: &[f64],
    w: &[f64],
    b: &[f64],
    in_gate: Option<&ChannelGate>,
) -> Vec<f64> {
    let t_out = d.t_out_transposed();
    let mut y = vec![0.0; d.c_out * t_out];
    for o in 0..d.c_out {
        y[o * t_out..(o + 1) * t_out].iter_mut().for_each(|v| *v = b[o]);
    }
    for seg in segments(d.t_in, d.c_in, d.c_in, None, in_gate) {
        for c in 0..seg.in_count {
            let xs = &x[c * d.t_in + seg.start..c * d.t_in + seg.end];
            for o in 0..d.c_out {
                let yrow = &mut y[o * t_out..(o + 1) * t_out];
                let wk = &w[(c * d.c_out + o) * d.kernel..(c * d.c_out + o + 1) * d.kernel];
                for (i, xv) in xs.iter().enumerate() {
                    let at = (seg.start + i) * d.stride;
                    for (yv, wv) in yrow[at..at + d.kernel].iter_mut().zip(wk) {
                        *yv += wv * xv;
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose1d_backward(
    d: ConvDims,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    in_gate: Option<&ChannelGate>,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let t_out = d.t_out_transposed();
    if let Some(db) = db {
        for o in 0..d.c_out {
            db[o] += dy[o * t_out..(o + 1) * t_out].iter().sum::<f64>();
        }
    }
    for seg in segments(d.t_in, d.c_in, d.c_in, None, in_gate) {
        let n = seg.end - seg.start;
        for c in 0..seg.in_count {
            let xoff = c * d.t_in + seg.start;
            for o in 0..d.c_out {
                let dyrow = &dy[o * t_out..(o + 1) * t_out];
                let w0 = (c * d.c_out + o) * d.kernel;
                let wk = &w[w0..w0 + d.kernel];
                for i in 0..n {
                    let at = (seg.start + i) * d.stride;
                    let g = &dyrow[at..at + d.kernel];
                    if let Some(dw) = dw.as_deref_mut() {
                        let xv = x[xoff + i];
                        for (a, gv) in dw[w0..w0 + d.kernel].iter_mut().zip(g) {
                            *a += gv * xv;
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[xoff + i] += g.iter().zip(wk).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
}

// ── GLU ─────────────────────────────────────────────────────────────────

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `[2N, T] → [N, T]`: first half times sigmoid of the second half.
pub fn glu_forward(x: &[f64], n: usize, t: usize) -> Vec<f64> {
    let (a, g) = x.split_at(n * t);
    a.iter().zip(g).map(|(a, g)| a * sigmoid(*g)).collect()
}

pub fn glu_backward(x: &[f64], n: usize, t: usize, dy: &[f64], dx: &mut [f64]) {
    let (a, g) = x.split_at(n * t);
    let (da, dg) = dx.split_at_mut(n * t);
    for i in 0..n * t {
        let s = sigmoid(g[i]);
        da[i] += dy[i] * s;
        dg[i] += dy[i] * a[i] * s * (1.0 - s);
    }
}

// ── GRU ─────────────────────────────────────────────────────────────────

/// Weights of `groups` independent GRUs of width `g` over a feature vector of
/// size `groups·g`. Gate order inside each `3g` block is (reset, update,
/// candidate).
#[derive(Clone, Copy)]
pub struct GruWeights<'a> {
    pub w_ih: &'a [f64],
    pub w_hh: &'a [f64],
    pub b_ih: &'a [f64],
    pub b_hh: &'a [f64],
}

/// Activations retained for backpropagation through time, all `[T, F]`.
#[derive(Clone, Debug, Default)]
pub struct GruCache {
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    pub hn: Vec<f64>,
    pub h_prev: Vec<f64>,
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Grouped GRU over `x: [F, T]`. Returns `([F, T] outputs, final state, cache)`.
pub fn gru_grouped_forward(
    wts: GruWeights,
    groups: usize,
    x: &[f64],
    f: usize,
    t: usize,
    h0: &[f64],
) -> (Vec<f64>, Vec<f64>, GruCache) {
    let g = f / groups;
    let xt = transpose(x, f, t);
    let mut h = h0.to_vec();
    let mut cache = GruCache {
        r: vec![0.0; t * f],
        z: vec![0.0; t * f],
        n: vec![0.0; t * f],
        hn: vec![0.0; t * f],
        h_prev: vec![0.0; t * f],
    };
    let mut out_t = vec![0.0; t * f];
    let mut gi = vec![0.0; 3 * g];
    let mut gh = vec![0.0; 3 * g];
    for step in 0..t {
        let xs = &xt[step * f..(step + 1) * f];
        cache.h_prev[step * f..(step + 1) * f].copy_from_slice(&h);
        let mut h_new = vec![0.0; f];
        for m in 0..groups {
            let wi = &wts.w_ih[m * 3 * g * g..(m + 1) * 3 * g * g];
            let wh = &wts.w_hh[m * 3 * g * g..(m + 1) * 3 * g * g];
            let xm = &xs[m * g..(m + 1) * g];
            let hm = &h[m * g..(m + 1) * g];
            for row in 0..3 * g {
                let wr = &wi[row * g..(row + 1) * g];
                gi[row] = wts.b_ih[m * 3 * g + row] + wr.iter().zip(xm).map(|(a, b)| a * b).sum::<f64>();
                let wr = &wh[row * g..(row + 1) * g];
                gh[row] = wts.b_hh[m * 3 * g + row] + wr.iter().zip(hm).map(|(a, b)| a * b).sum::<f64>();
            }
            for i in 0..g {
                let r = sigmoid(gi[i] + gh[i]);
                let z = sigmoid(gi[g + i] + gh[g + i]);
                let n = (gi[2 * g + i] + r * gh[2 * g + i]).tanh();
                let idx = step * f + m * g + i;
                cache.r[idx] = r;
                cache.z[idx] = z;
                cache.n[idx] = n;
                cache.hn[idx] = gh[2 * g + i];
                h_new[m * g + i] = (1.0 - z) * n + z * hm[i];
            }
        }
        out_t[step * f..(step + 1) * f].copy_from_slice(&h_new);
        h = h_new;
    }
    (transpose(&out_t, t, f), h, cache)
}

pub struct GruGrads<'a> {
    pub dx: Option<&'a mut [f64]>,
    pub dw_ih: Option<&'a mut [f64]>,
    pub dw_hh: Option<&'a mut [f64]>,
    pub db_ih: Option<&'a mut [f64]>,
    pub db_hh: Option<&'a mut [f64]>,
}

/// Per-step gate gradients shared by the grouped and diagonal backward
/// passes. Returns `(d pre-activation input gates, d pre-activation hidden
/// gates)` for one feature and the gradient flowing to `h_prev`.
#[inline]
fn gru_cell_backward(dh: f64, r: f64, z: f64, n: f64, hn: f64, hp: f64) -> ([f64; 3], [f64; 3], f64) {
    let dn = dh * (1.0 - z);
    let dz = dh * (hp - n);
    let dh_prev = dh * z;
    let dan = dn * (1.0 - n * n);
    let dr = dan * hn;
    let dar = dr * r * (1.0 - r);
    let daz = dz * z * (1.0 - z);
    ([dar, daz, dan], [dar, daz, dan * r], dh_prev)
}

#[allow(clippy::too_many_arguments)]
pub fn gru_grouped_backward(
    wts: GruWeights,
    groups: usize,
    x: &[f64],
    f: usize,
    t: usize,
    cache: &GruCache,
    dy: &[f64],
    grads: GruGrads,
) {
    let GruGrads {
        mut dx,
        mut dw_ih,
        mut dw_hh,
        mut db_ih,
        mut db_hh,
    } = grads;
    let g = f / groups;
    let xt = transpose(x, f, t);
    let dyt = transpose(dy, f, t);
    let mut dxt = vec![0.0; t * f];
    let mut carry = vec![0.0; f];
    let mut dgi = vec![0.0; 3 * g];
    let mut dgh = vec![0.0; 3 * g];
    for step in (0..t).rev() {
        let mut next_carry = vec![0.0; f];
        for m in 0..groups {
            for i in 0..g {
                let fi = m * g + i;
                let idx = step * f + fi;
                let dh = dyt[idx] + carry[fi];
                let (di, dhh, dprev) = gru_cell_backward(
                    dh,
                    cache.r[idx],
                    cache.z[idx],
                    cache.n[idx],
                    cache.hn[idx],
                    cache.h_prev[idx],
                );
                for k in 0..3 {
                    dgi[k * g + i] = di[k];
                    dgh[k * g + i] = dhh[k];
                }
                next_carry[fi] += dprev;
            }
            let wi = &wts.w_ih[m * 3 * g * g..(m + 1) * 3 * g * g];
            let wh = &wts.w_hh[m * 3 * g * g..(m + 1) * 3 * g * g];
            let xm = &xt[step * f + m * g..step * f + (m + 1) * g];
            let hp = &cache.h_prev[step * f + m * g..step * f + (m + 1) * g];
            for row in 0..3 * g {
                if let Some(db) = db_ih.as_deref_mut() {
                    db[m * 3 * g + row] += dgi[row];
                }
                if let Some(db) = db_hh.as_deref_mut() {
                    db[m * 3 * g + row] += dgh[row];
                }
                if let Some(dw) = dw_ih.as_deref_mut() {
                    let base = m * 3 * g * g + row * g;
                    for (v, xv) in dw[base..base + g].iter_mut().zip(xm) {
                        *v += dgi[row] * xv;
                    }
                }
                if let Some(dw) = dw_hh.as_deref_mut() {
                    let base = m * 3 * g * g + row * g;
                    for (v, hv) in dw[base..base + g].iter_mut().zip(hp) {
                        *v += dgh[row] * hv;
                    }
                }
                let wr = &wi[row * g..(row + 1) * g];
                for (col, wv) in wr.iter().enumerate() {
                    dxt[step * f + m * g + col] += wv * dgi[row];
                }
                let wr = &wh[row * g..(row + 1) * g];
                for (col, wv) in wr.iter().enumerate() {
                    next_carry[m * g + col] += wv * dgh[row];
                }
            }
        }
        carry = next_carry;
    }
    if let Some(dx) = dx.as_deref_mut() {
        let dxf = transpose(&dxt, t, f);
        for (a, b) in dx.iter_mut().zip(dxf) {
            *a += b;
        }
    }
}

/// Diagonal GRU: every feature is its own scalar GRU. Weights are `[3, F]`
/// (reset, update, candidate rows).
pub fn gru_diagonal_forward(
    wts: GruWeights,
    x: &[f64],
    f: usize,
    t: usize,
    h0: &[f64],
) -> (Vec<f64>, Vec<f64>, GruCache) {
    let mut h = h0.to_vec();
    let mut y = vec![0.0; f * t];
    let mut cache = GruCache {
        r: vec![0.0; t * f],
        z: vec![0.0; t * f],
        n: vec![0.0; t * f],
        hn: vec![0.0; t * f],
        h_prev: vec![0.0; t * f],
    };
    for step in 0..t {
        for i in 0..f {
            let xv = x[i * t + step];
            let hv = h[i];
            let gi = |k: usize| wts.w_ih[k * f + i] * xv + wts.b_ih[k * f + i];
            let gh = |k: usize| wts.w_hh[k * f + i] * hv + wts.b_hh[k * f + i];
            let r = sigmoid(gi(0) + gh(0));
            let z = sigmoid(gi(1) + gh(1));
            let hn = gh(2);
            let n = (gi(2) + r * hn).tanh();
            let idx = step * f + i;
            cache.r[idx] = r;
            cache.z[idx] = z;
            cache.n[idx] = n;
            cache.hn[idx] = hn;
            cache.h_prev[idx] = hv;
            h[i] = (1.0 - z) * n + z * hv;
            y[i * t + step] = h[i];
        }
    }
    (y, h, cache)
}

#[allow(clippy::too_many_arguments)]
pub fn gru_diagonal_backward(
    wts: GruWeights,
    x: &[f64],
    f: usize,
    t: usize,
    cache: &GruCache,
    dy: &[f64],
    grads: GruGrads,
) {
    let GruGrads {
        mut dx,
        mut dw_ih,
        mut dw_hh,
        mut db_ih,
        mut db_hh,
    } = grads;
    for i in 0..f {
        let mut carry = 0.0;
        for step in (0..t).rev() {
            let idx = step * f + i;
            let dh = dy[i * t + step] + carry;
            let hp = cache.h_prev[idx];
            let (di, dhh, dprev) =
                gru_cell_backward(dh, cache.r[idx], cache.z[idx], cache.n[idx], cache.hn[idx], hp);
            let xv = x[i * t + step];
            let mut back = dprev;
            for k in 0..3 {
                if let Some(d) = db_ih.as_deref_mut() {
                    d[k * f + i] += di[k];
                }
                if let Some(d) = db_hh.as_deref_mut() {
                    d[k * f + i] += dhh[k];
                }
                if let Some(d) = dw_ih.as_deref_mut() {
                    d[k * f + i] += di[k] * xv;
                }
                if let Some(d) = dw_hh.as_deref_mut() {
                    d[k * f + i] += dhh[k] * hp;
                }
                if let Some(d) = dx.as_deref_mut() {
                    d[i * t + step] += wts.w_ih[k * f + i] * di[k];
                }
                back += wts.w_hh[k * f + i] * dhh[k];
            }
            carry = back;
        }
    }
}

// ── STFT ────────────────────────────────────────────────────────────────

/// One-sided complex spectrogram, `frames × bins`, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> Complex64 {
        self.values[frame * self.bins + bin]
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Frame `l` as a slice of `bins` complex values.
    pub fn frame(&self, l: usize) -> &[Complex64] {
        &self.values[l * self.bins..(l + 1) * self.bins]
    }

    /// Spectrogram of `x` without padding; the caller pads so that every
    /// sample is covered.
    pub fn compute(x: &[f64], window: &[f64], hop: usize) -> Result<Self> {
        if hop == 0 {
            return Err(Error::invalid("stft", "hop must be positive"));
        }
        if x.is_empty() {
            return Err(Error::invalid("stft", "empty signal"));
        }
        if window.is_empty() || x.len() < window.len() {
            return Err(Error::invalid("stft", "signal shorter than window"));
        }
        let frames = stft_frames(x.len(), window.len(), hop);
        let bins = window.len() / 2 + 1;
        let raw = stft_forward(x, window, hop);
        let values = (0..frames * bins)
            .map(|i| Complex64::new(raw[i], raw[frames * bins + i]))
            .collect();
        Ok(ComplexSpectrogram {
            frames,
            bins,
            values,
        })
    }
}

pub fn stft_frames(len: usize, win: usize, hop: usize) -> usize {
    1 + (len - win) / hop
}

/// Returns `[2, frames, bins]`: real parts then imaginary parts.
pub fn stft_forward(x: &[f64], window: &[f64], hop: usize) -> Vec<f64> {
    let n = window.len();
    let bins = n / 2 + 1;
    let frames = stft_frames(x.len(), n, hop);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut out = vec![0.0; 2 * frames * bins];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for l in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(x[l * hop + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            out[l * bins + f] = buf[f].re;
            out[frames * bins + l * bins + f] = buf[f].im;
        }
    }
    out
}

pub fn stft_backward(len: usize, window: &[f64], hop: usize, dy: &[f64], dx: &mut [f64]) {
    let n = window.len();
    let bins = n / 2 + 1;
    let frames = stft_frames(len, n, hop);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for l in 0..frames {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for f in 0..bins {
            buf[f] = Complex64::new(dy[l * bins + f], dy[frames * bins + l * bins + f]);
        }
        ifft.process(&mut buf);
        for i in 0..n {
            dx[l * hop + i] += window[i] * buf[i].re;
        }
    }
}

/// Periodic Hann window; overlap-adds to a constant at 50 % hop.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

// ── windowed-sinc resampling ────────────────────────────────────────────

/// Zero crossings of the interpolation kernel on each side, in low-rate
/// samples; each output sample of either direction uses `2·ZEROS` taps per
/// polyphase branch.
pub const RESAMPLE_ZEROS: usize = 32;
pub const KAISER_BETA: f64 = 8.0;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(v: f64) -> f64 {
    if v == 0.0 {
        1.0
    } else {
        (PI * v).sin() / (PI * v)
    }
}

/// Kaiser-windowed sinc with cutoff at the low-rate Nyquist frequency, indexed
/// by `d + (ZEROS·factor − 1)` for `|d| < ZEROS·factor`.
fn sinc_kernel(factor: usize) -> Vec<f64> {
    let half = (RESAMPLE_ZEROS * factor) as f64;
    let span = RESAMPLE_ZEROS * factor - 1;
    let norm = bessel_i0(KAISER_BETA);
    (0..=2 * span)
        .map(|i| {
            let d = i as f64 - span as f64;
            let ratio = d / half;
            let win = bessel_i0(KAISER_BETA * (1.0 - ratio * ratio).max(0.0).sqrt()) / norm;
            sinc(d / factor as f64) * win
        })
        .collect()
}

/// Interpolation taps with every polyphase branch normalised to unit sum, so a
/// constant input stays constant away from the edges.
pub fn upsample_taps(factor: usize) -> Vec<f64> {
    let mut h = sinc_kernel(factor);
    let span = (RESAMPLE_ZEROS * factor - 1) as isize;
    for p in 0..factor {
        let idx: Vec<usize> = (0..h.len())
            .filter(|&i| (i as isize - span).rem_euclid(factor as isize) as usize == p)
            .collect();
        let s: f64 = idx.iter().map(|&i| h[i]).sum();
        for i in idx {
            h[i] /= s;
        }
    }
    h
}

/// Anti-aliasing taps normalised to unit DC gain.
pub fn downsample_taps(factor: usize) -> Vec<f64> {
    let mut h = sinc_kernel(factor);
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

/// Index range `[lo, hi)` of the `len` samples within `span` of `centre`,
/// and the matching offset into the taps.
fn window_range(centre: usize, span: usize, len: usize) -> (usize, usize, usize) {
    let lo = centre.saturating_sub(span);
    let hi = (centre + span + 1).min(len);
    (lo, hi, lo + span - centre)
}

/// `y[n] = Σ_k x[k]·h[n − k·U]`, `n ∈ [0, U·T)`.
pub fn upsample_forward(x: &[f64], factor: usize, taps: &[f64]) -> Vec<f64> {
    let span = taps.len() / 2;
    let out_len = x.len() * factor;
    let mut y = vec![0.0; out_len];
    for (k, xv) in x.iter().enumerate() {
        let (lo, hi, t0) = window_range(k * factor, span, out_len);
        for (yv, h) in y[lo..hi].iter_mut().zip(&taps[t0..]) {
            *yv += xv * h;
        }
    }
    y
}

pub fn upsample_backward(dy: &[f64], factor: usize, taps: &[f64], dx: &mut [f64]) {
    let span = taps.len() / 2;
    for (k, d) in dx.iter_mut().enumerate() {
        let (lo, hi, t0) = window_range(k * factor, span, dy.len());
        *d += dy[lo..hi].iter().zip(&taps[t0..]).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `y[m] = Σ_n x[n]·h[m·U − n]`, `m ∈ [0, T/U)`.
pub fn downsample_forward(x: &[f64], factor: usize, taps: &[f64]) -> Vec<f64> {
    let span = taps.len() / 2;
    let rev: Vec<f64> = taps.iter().rev().cloned().collect();
    (0..x.len() / factor)
        .map(|m| {
            let (lo, hi, t0) = window_range(m * factor, span, x.len());
            x[lo..hi].iter().zip(&rev[t0..]).map(|(a, b)| a * b).sum()
        })
        .collect()
}

pub fn downsample_backward(dy: &[f64], factor: usize, taps: &[f64], dx: &mut [f64]) {
    let span = taps.len() / 2;
    let rev: Vec<f64> = taps.iter().rev().cloned().collect();
    let len = dx.len();
    for (m, g) in dy.iter().enumerate() {
        let (lo, hi, t0) = window_range(m * factor, span, len);
        for (v, h) in dx[lo..hi].iter_mut().zip(&rev[t0..]) {
            *v += g * h;
        }
    }
}
