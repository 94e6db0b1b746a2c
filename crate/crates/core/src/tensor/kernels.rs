//! Forward and backward kernels on raw buffers.
//!
//! Spatial layouts are handled as `h x w` planes; a 1-D field has `h = 1`.
//! All spatial convolutions wrap around (periodic padding).

use num_complex::Complex64;

use super::fft::{irfft2, rfft2};
use crate::error::{config_err, shape_err, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Spatial plane of a `[c, ...]` shape.
pub fn plane(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        2 => Ok((1, shape[1])),
        3 => Ok((shape[1], shape[2])),
        _ => shape_err(format!(
            "expected [channels, spatial...] with 1 or 2 spatial axes, got {shape:?}"
        )),
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `y[o, s] = b[o] + sum_i w[o, i] x[i, s]`.
pub fn conv1x1_forward(
    x: &[f64],
    c_in: usize,
    sites: usize,
    w: &[f64],
    c_out: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut y = vec![0.0; c_out * sites];
    for o in 0..c_out {
        let row = &mut y[o * sites..(o + 1) * sites];
        if let Some(b) = bias {
            row.fill(b[o]);
        }
        for i in 0..c_in {
            let wv = w[o * c_in + i];
            if wv == 0.0 {
                continue;
            }
            let xr = &x[i * sites..(i + 1) * sites];
            for (yv, xv) in row.iter_mut().zip(xr) {
                *yv += wv * xv;
            }
        }
    }
    y
}

pub struct Conv1x1Grads {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv1x1_backward(
    gy: &[f64],
    x: &[f64],
    c_in: usize,
    sites: usize,
    w: &[f64],
    c_out: usize,
) -> Conv1x1Grads {
    let mut gx = vec![0.0; c_in * sites];
    let mut gw = vec![0.0; c_out * c_in];
    let mut gb = vec![0.0; c_out];
    for o in 0..c_out {
        let gr = &gy[o * sites..(o + 1) * sites];
        gb[o] = gr.iter().sum();
        for i in 0..c_in {
            let xr = &x[i * sites..(i + 1) * sites];
            gw[o * c_in + i] = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
            let wv = w[o * c_in + i];
            if wv != 0.0 {
                let gxr = &mut gx[i * sites..(i + 1) * sites];
                for (g, v) in gxr.iter_mut().zip(gr) {
                    *g += wv * v;
                }
            }
        }
    }
    Conv1x1Grads {
        x: gx,
        w: gw,
        bias: gb,
    }
}

/// Geometry of a periodic stencil convolution.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Stencil {
    pub fn new(h: usize, w: usize, kh: usize, kw: usize) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return config_err(format!("kernel extents must be odd, got {kh}x{kw}"));
        }
        if kh > h || kw > w {
            return config_err(format!("kernel {kh}x{kw} larger than field {h}x{w}"));
        }
        Ok(Self { h, w, kh, kw })
    }

    fn sites(&self) -> usize {
        self.h * self.w
    }

    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    /// Source row for output row `r` and kernel row `a`.
    #[inline]
    fn src_row(&self, r: usize, a: usize) -> usize {
        (r + a + self.h - self.kh / 2) % self.h
    }

    #[inline]
    fn src_col(&self, c: usize, b: usize) -> usize {
        (c + b + self.w - self.kw / 2) % self.w
    }
}

/// Depthwise periodic cross-correlation with channel multiplier
/// `c_out / c_in`: output channel `o` reads input channel `o / mult`.
pub fn depthwise_forward(x: &[f64], c_in: usize, k: &[f64], c_out: usize, st: Stencil) -> Vec<f64> {
    let mult = c_out / c_in;
    let sites = st.sites();
    let mut y = vec![0.0; c_out * sites];
    for o in 0..c_out {
        let xi = &x[(o / mult) * sites..(o / mult + 1) * sites];
        let ko = &k[o * st.taps()..(o + 1) * st.taps()];
        let yo = &mut y[o * sites..(o + 1) * sites];
        for a in 0..st.kh {
            for b in 0..st.kw {
                let kv = ko[a * st.kw + b];
                if kv == 0.0 {
                    continue;
                }
                for r in 0..st.h {
                    let sr = st.src_row(r, a);
                    for c in 0..st.w {
                        yo[r * st.w + c] += kv * xi[sr * st.w + st.src_col(c, b)];
                    }
                }
            }
        }
    }
    y
}

/// Returns `(grad_x, grad_kernel)`.
pub fn depthwise_backward(
    gy: &[f64],
    x: &[f64],
    c_in: usize,
    k: &[f64],
    c_out: usize,
    st: Stencil,
) -> (Vec<f64>, Vec<f64>) {
    let mult = c_out / c_in;
    let sites = st.sites();
    let mut gx = vec![0.0; c_in * sites];
    let mut gk = vec![0.0; k.len()];
    for o in 0..c_out {
        let i = o / mult;
        let go = &gy[o * sites..(o + 1) * sites];
        for a in 0..st.kh {
            for b in 0..st.kw {
                let t = o * st.taps() + a * st.kw + b;
                let kv = k[t];
                let mut acc = 0.0;
                for r in 0..st.h {
                    let sr = st.src_row(r, a);
                    for c in 0..st.w {
                        let src = i * sites + sr * st.w + st.src_col(c, b);
                        let g = go[r * st.w + c];
                        acc += g * x[src];
                        gx[src] += kv * g;
                    }
                }
                gk[t] = acc;
            }
        }
    }
    (gx, gk)
}

/// Dense periodic cross-correlation, weights `[c_out, c_in, kh, kw]`.
pub fn conv_forward(
    x: &[f64],
    c_in: usize,
    w: &[f64],
    c_out: usize,
    bias: Option<&[f64]>,
    st: Stencil,
) -> Vec<f64> {
    let sites = st.sites();
    let mut y = vec![0.0; c_out * sites];
    let taps = st.taps();
    for o in 0..c_out {
        let yo = &mut y[o * sites..(o + 1) * sites];
        if let Some(b) = bias {
            yo.fill(b[o]);
        }
        for i in 0..c_in {
            let xi = &x[i * sites..(i + 1) * sites];
            for a in 0..st.kh {
                for b in 0..st.kw {
                    let kv = w[(o * c_in + i) * taps + a * st.kw + b];
                    if kv == 0.0 {
                        continue;
                    }
                    for r in 0..st.h {
                        let sr = st.src_row(r, a);
                        let xrow = &xi[sr * st.w..(sr + 1) * st.w];
                        let yrow = &mut yo[r * st.w..(r + 1) * st.w];
                        let shift = (b + st.w - st.kw / 2) % st.w;
                        // yrow[c] += kv * xrow[(c + shift) % w], split to avoid the modulo
                        let split = st.w - shift;
                        for (yv, xv) in yrow[..split].iter_mut().zip(&xrow[shift..]) {
                            *yv += kv * xv;
                        }
                        for (yv, xv) in yrow[split..].iter_mut().zip(&xrow[..shift]) {
                            *yv += kv * xv;
                        }
                    }
                }
            }
        }
    }
    y
}

pub struct ConvGrads {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv_backward(
    gy: &[f64],
    x: &[f64],
    c_in: usize,
    w: &[f64],
    c_out: usize,
    st: Stencil,
) -> ConvGrads {
    let sites = st.sites();
    let taps = st.taps();
    let mut gx = vec![0.0; c_in * sites];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; c_out];
    for o in 0..c_out {
        let go = &gy[o * sites..(o + 1) * sites];
        gb[o] = go.iter().sum();
        for i in 0..c_in {
            let xi = &x[i * sites..(i + 1) * sites];
            let gxi = &mut gx[i * sites..(i + 1) * sites];
            for a in 0..st.kh {
                for b in 0..st.kw {
                    let t = (o * c_in + i) * taps + a * st.kw + b;
                    let kv = w[t];
                    let shift = (b + st.w - st.kw / 2) % st.w;
                    let split = st.w - shift;
                    let mut acc = 0.0;
                    for r in 0..st.h {
                        let sr = st.src_row(r, a);
                        let grow = &go[r * st.w..(r + 1) * st.w];
                        let xrow = &xi[sr * st.w..(sr + 1) * st.w];
                        let gxrow = &mut gxi[sr * st.w..(sr + 1) * st.w];
                        for (g, (xv, gxv)) in grow[..split]
                            .iter()
                            .zip(xrow[shift..].iter().zip(gxrow[shift..].iter_mut()))
                        {
                            acc += g * xv;
                            *gxv += kv * g;
                        }
                        for (g, (xv, gxv)) in grow[split..]
                            .iter()
                            .zip(xrow[..shift].iter().zip(gxrow[..shift].iter_mut()))
                        {
                            acc += g * xv;
                            *gxv += kv * g;
                        }
                    }
                    gw[t] = acc;
                }
            }
        }
    }
    ConvGrads {
        x: gx,
        w: gw,
        bias: gb,
    }
}

/// Retained Fourier modes of a spectral convolution.
///
/// For 1-D fields (`h = 1`) only `cols` matters: bins `0..cols` are kept.
/// For 2-D fields rows `0..rows` and `h-rows..h` are kept (positive and
/// negative frequencies) against columns `0..cols` of the half spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Modes {
    pub rows: usize,
    pub cols: usize,
}

impl Modes {
    pub fn one_d(cols: usize) -> Self {
        Self { rows: 1, cols }
    }

    pub fn two_d(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    /// Number of complex weights per (out, in) channel pair.
    pub fn count(&self) -> usize {
        if self.rows <= 1 {
            self.cols
        } else {
            2 * self.rows * self.cols
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.cols == 0 || self.cols > w / 2 + 1 {
            return config_err(format!(
                "{} modes exceed the {} available for extent {w}",
                self.cols,
                w / 2 + 1
            ));
        }
        if h > 1 && (self.rows == 0 || self.rows > h / 2) {
            return config_err(format!(
                "{} row modes exceed the {} available for extent {h}",
                self.rows,
                h / 2
            ));
        }
        if h == 1 && self.rows > 1 {
            return config_err("2-D modes given for a 1-D field");
        }
        Ok(())
    }

    /// Flat half-spectrum indices of the kept modes, in weight order.
    pub fn indices(&self, h: usize, w: usize) -> Vec<usize> {
        let wh = w / 2 + 1;
        if h == 1 {
            return (0..self.cols).collect();
        }
        let rows = (0..self.rows).chain(h - self.rows..h);
        rows.flat_map(|r| (0..self.cols).map(move |c| r * wh + c))
            .collect()
    }
}

/// Multiplicity of a half-spectrum column in the full spectrum.
fn column_weight(col: usize, w: usize) -> f64 {
    if col == 0 || 2 * col == w {
        1.0
    } else {
        2.0
    }
}

/// Direct-transform tables for the first `cols` bins of a length-`n`
/// signal. Cheaper than a full FFT when few modes are kept.
struct ModeTable {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl ModeTable {
    fn new(n: usize, cols: usize) -> Self {
        let mut cos = Vec::with_capacity(cols * n);
        let mut sin = Vec::with_capacity(cols * n);
        for m in 0..cols {
            for j in 0..n {
                let th = 2.0 * std::f64::consts::PI * ((m * j) % n) as f64 / n as f64;
                cos.push(th.cos());
                // exact zeros keep DC and Nyquist bins real
                sin.push(if m == 0 || 2 * m == n { 0.0 } else { th.sin() });
            }
        }
        Self { n, cos, sin }
    }

    /// Appends `X[m] = sum_j x[j] exp(-2 pi i m j / n)` for each kept `m`.
    fn forward(&self, x: &[f64], out: &mut Vec<Complex64>) {
        for (c, s) in self.cos.chunks(self.n).zip(self.sin.chunks(self.n)) {
            let mut re = 0.0;
            let mut im = 0.0;
            for ((&v, &cv), &sv) in x.iter().zip(c).zip(s) {
                re += v * cv;
                im -= v * sv;
            }
            out.push(Complex64::new(re, im));
        }
    }

    /// Appends the real inverse of a half spectrum that is zero beyond
    /// the kept bins; matches `irfft` up to rounding.
    fn inverse(&self, spec: &[Complex64], out: &mut Vec<f64>) {
        let start = out.len();
        out.resize(start + self.n, 0.0);
        let y = &mut out[start..];
        let inv = 1.0 / self.n as f64;
        for (m, (c, s)) in self
            .cos
            .chunks(self.n)
            .zip(self.sin.chunks(self.n))
            .enumerate()
        {
            let wgt = column_weight(m, self.n) * inv;
            let (re, im) = (spec[m].re * wgt, spec[m].im * wgt);
            for ((v, &cv), &sv) in y.iter_mut().zip(c).zip(s) {
                *v += re * cv - im * sv;
            }
        }
    }
}

thread_local! {
    static MODE_TABLES: std::cell::RefCell<std::collections::HashMap<(usize, usize), std::rc::Rc<ModeTable>>> =
        Default::default();
}

/// Table for 1-D fields with few kept modes, `None` when the FFT is cheaper.
fn mode_table(h: usize, w: usize, cols: usize) -> Option<std::rc::Rc<ModeTable>> {
    let log = w.trailing_zeros() as usize;
    if h != 1 || cols > 2 * log + 8 {
        return None;
    }
    Some(MODE_TABLES.with(|t| {
        t.borrow_mut()
            .entry((w, cols))
            .or_insert_with(|| std::rc::Rc::new(ModeTable::new(w, cols)))
            .clone()
    }))
}

pub struct SpectralCache {
    /// Input spectrum at the kept modes, `[c_in][n_kept]`.
    pub x_hat: Vec<Complex64>,
}

/// Weights are `[n_kept, c_out, c_in, 2]` (real, imaginary).
#[allow(clippy::too_many_arguments)]
pub fn spectral_forward(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    c_out: usize,
    modes: Modes,
) -> Result<(Vec<f64>, SpectralCache)> {
    modes.validate(h, w)?;
    let idx = modes.indices(h, w);
    let nk = idx.len();
    let sites = h * w;
    let wh = w / 2 + 1;
    let table = mode_table(h, w, modes.cols);
    let mut x_hat = Vec::with_capacity(c_in * nk);
    for i in 0..c_in {
        let xi = &x[i * sites..(i + 1) * sites];
        match &table {
            Some(t) => t.forward(xi, &mut x_hat),
            None => {
                let spec = rfft2(xi, h, w)?;
                x_hat.extend(idx.iter().map(|&j| spec[j]));
            }
        }
    }
    let mut y = Vec::with_capacity(c_out * sites);
    if let Some(t) = &table {
        let mut acc = vec![Complex64::new(0.0, 0.0); nk];
        for o in 0..c_out {
            for (m, a) in acc.iter_mut().enumerate() {
                *a = Complex64::new(0.0, 0.0);
                for i in 0..c_in {
                    let base = ((m * c_out + o) * c_in + i) * 2;
                    *a += Complex64::new(weights[base], weights[base + 1]) * x_hat[i * nk + m];
                }
            }
            t.inverse(&acc, &mut y);
        }
        return Ok((y, SpectralCache { x_hat }));
    }
    let mut spec = vec![Complex64::new(0.0, 0.0); h * wh];
    for o in 0..c_out {
        spec.fill(Complex64::new(0.0, 0.0));
        for (m, &j) in idx.iter().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..c_in {
                let base = ((m * c_out + o) * c_in + i) * 2;
                acc += Complex64::new(weights[base], weights[base + 1]) * x_hat[i * nk + m];
            }
            spec[j] = acc;
        }
        y.extend(irfft2(&spec, h, w)?);
    }
    Ok((y, SpectralCache { x_hat }))
}

/// Returns `(grad_x, grad_weights)`.
#[allow(clippy::too_many_arguments)]
pub fn spectral_backward(
    gy: &[f64],
    cache: &SpectralCache,
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    c_out: usize,
    modes: Modes,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let idx = modes.indices(h, w);
    let nk = idx.len();
    let sites = h * w;
    let wh = w / 2 + 1;
    let n = sites as f64;
    // dL/dY = (c_k / N) rfft2(gy) at the kept modes.
    let table = mode_table(h, w, modes.cols);
    let mut g_out = Vec::with_capacity(c_out * nk);
    for o in 0..c_out {
        let go = &gy[o * sites..(o + 1) * sites];
        match &table {
            Some(t) => {
                let at = g_out.len();
                t.forward(go, &mut g_out);
                for (m, g) in g_out[at..].iter_mut().enumerate() {
                    *g *= column_weight(m, w) / n;
                }
            }
            None => {
                let spec = rfft2(go, h, w)?;
                g_out.extend(
                    idx.iter()
                        .map(|&j| spec[j] * (column_weight(j % wh, w) / n)),
                );
            }
        }
    }
    let mut gw = vec![0.0; weights.len()];
    let mut g_in = vec![Complex64::new(0.0, 0.0); c_in * nk];
    for m in 0..nk {
        for o in 0..c_out {
            let g = g_out[o * nk + m];
            for i in 0..c_in {
                let base = ((m * c_out + o) * c_in + i) * 2;
                let prod = g * cache.x_hat[i * nk + m].conj();
                gw[base] += prod.re;
                gw[base + 1] += prod.im;
                g_in[i * nk + m] += Complex64::new(weights[base], -weights[base + 1]) * g;
            }
        }
    }
    // dL/dx = N irfft2(g / c_k) with zeros off the kept set.
    let mut gx = Vec::with_capacity(c_in * sites);
    if let Some(t) = &table {
        let mut g = vec![Complex64::new(0.0, 0.0); nk];
        for i in 0..c_in {
            for (m, v) in g.iter_mut().enumerate() {
                *v = g_in[i * nk + m] * (n / column_weight(m, w));
            }
            t.inverse(&g, &mut gx);
        }
        return Ok((gx, gw));
    }
    let mut spec = vec![Complex64::new(0.0, 0.0); h * wh];
    for i in 0..c_in {
        spec.fill(Complex64::new(0.0, 0.0));
        for (m, &j) in idx.iter().enumerate() {
            spec[j] = g_in[i * nk + m] * (n / column_weight(j % wh, w));
        }
        gx.extend(irfft2(&spec, h, w)?);
    }
    Ok((gx, gw))
}

pub struct LayerNormCache {
    pub x_hat: Vec<f64>,
    pub rstd: f64,
}

/// Normalizes over every element; `gamma`/`beta` are per channel.
pub fn layer_norm_forward(
    x: &[f64],
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let x_hat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
    let per = x.len() / channels;
    let y = x_hat
        .iter()
        .enumerate()
        .map(|(j, v)| gamma[j / per] * v + beta[j / per])
        .collect();
    (y, LayerNormCache { x_hat, rstd })
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward(
    gy: &[f64],
    cache: &LayerNormCache,
    channels: usize,
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = gy.len() as f64;
    let per = gy.len() / channels;
    let mut gg = vec![0.0; channels];
    let mut gb = vec![0.0; channels];
    let mut g_hat = vec![0.0; gy.len()];
    for j in 0..gy.len() {
        let c = j / per;
        gg[c] += gy[j] * cache.x_hat[j];
        gb[c] += gy[j];
        g_hat[j] = gy[j] * gamma[c];
    }
    let mean_g = g_hat.iter().sum::<f64>() / n;
    let mean_gx = g_hat
        .iter()
        .zip(&cache.x_hat)
        .map(|(g, x)| g * x)
        .sum::<f64>()
        / n;
    let gx = g_hat
        .iter()
        .zip(&cache.x_hat)
        .map(|(g, x)| cache.rstd * (g - mean_g - x * mean_gx))
        .collect();
    (gx, gg, gb)
}
