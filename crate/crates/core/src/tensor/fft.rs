//! Radix-2 FFT with real-input helpers.
//!
//! Conventions: the forward transform is unnormalized,
//! `X[k] = sum_j x[j] exp(-2 pi i j k / n)`, and the inverse carries the
//! `1/n` factor. Parseval therefore reads `sum |x|^2 = (1/n) sum_k |X[k]|^2`
//! over the full spectrum; for the half spectrum returned by [`rfft`] the
//! bins `1..n/2` count twice.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use num_complex::Complex64;

use crate::error::{config_err, Result};

struct Plan {
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl Plan {
    fn new(n: usize) -> Self {
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| {
                if n == 1 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Self { twiddles, bitrev }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<Plan>>> = RefCell::new(HashMap::new());
}

fn plan(n: usize) -> Rc<Plan> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry(n)
            .or_insert_with(|| Rc::new(Plan::new(n)))
            .clone()
    })
}

pub fn check_len(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return config_err(format!("FFT length {n} is not a power of two"));
    }
    Ok(())
}

fn transform(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let plan = plan(n);
    for i in 0..n {
        let j = plan.bitrev[i];
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let mut w = plan.twiddles[k * stride];
                if inverse {
                    w = w.conj();
                }
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
    if inverse {
        let scale = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

/// In-place forward complex FFT.
pub fn fft(buf: &mut [Complex64]) -> Result<()> {
    check_len(buf.len())?;
    transform(buf, false);
    Ok(())
}

/// In-place inverse complex FFT (normalized by `1/n`).
pub fn ifft(buf: &mut [Complex64]) -> Result<()> {
    check_len(buf.len())?;
    transform(buf, true);
    Ok(())
}

/// Real-input FFT returning the `n/2 + 1` non-negative frequency bins.
pub fn rfft(x: &[f64]) -> Result<Vec<Complex64>> {
    let n = x.len();
    check_len(n)?;
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut buf, false);
    buf.truncate(n / 2 + 1);
    Ok(buf)
}

/// Inverse of [`rfft`] for an output of length `n`.
///
/// The imaginary parts of the DC and Nyquist bins are ignored.
pub fn irfft(spec: &[Complex64], n: usize) -> Result<Vec<f64>> {
    check_len(n)?;
    let half = n / 2 + 1;
    if spec.len() != half {
        return config_err(format!(
            "irfft of length {n} needs {half} bins, got {}",
            spec.len()
        ));
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    if n == 1 {
        return Ok(vec![spec[0].re]);
    }
    buf[0] = Complex64::new(spec[0].re, 0.0);
    buf[n / 2] = Complex64::new(spec[n / 2].re, 0.0);
    for k in 1..n / 2 {
        buf[k] = spec[k];
        buf[n - k] = spec[k].conj();
    }
    transform(&mut buf, true);
    Ok(buf.into_iter().map(|c| c.re).collect())
}

/// 2-D real FFT of an `h x w` row-major field: full transform along rows,
/// half spectrum along the last axis. Output is `h x (w/2 + 1)`.
pub fn rfft2(x: &[f64], h: usize, w: usize) -> Result<Vec<Complex64>> {
    check_len(h)?;
    check_len(w)?;
    let wh = w / 2 + 1;
    let mut out = vec![Complex64::new(0.0, 0.0); h * wh];
    for r in 0..h {
        let row = rfft(&x[r * w..(r + 1) * w])?;
        out[r * wh..(r + 1) * wh].copy_from_slice(&row);
    }
    if h > 1 {
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..wh {
            for r in 0..h {
                col[r] = out[r * wh + c];
            }
            transform(&mut col, false);
            for r in 0..h {
                out[r * wh + c] = col[r];
            }
        }
    }
    Ok(out)
}

/// Inverse of [`rfft2`].
pub fn irfft2(spec: &[Complex64], h: usize, w: usize) -> Result<Vec<f64>> {
    check_len(h)?;
    check_len(w)?;
    let wh = w / 2 + 1;
    if spec.len() != h * wh {
        return config_err("irfft2 spectrum size mismatch");
    }
    let mut tmp = spec.to_vec();
    if h > 1 {
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..wh {
            for r in 0..h {
                col[r] = tmp[r * wh + c];
            }
            transform(&mut col, true);
            for r in 0..h {
                tmp[r * wh + c] = col[r];
            }
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        out.extend(irfft(&tmp[r * wh..(r + 1) * wh], w)?);
    }
    Ok(out)
}
