use std::f64::consts::PI;

use num_complex::Complex64;

use super::{Grid1D, PdeKind, PdeParams, Trajectory};
use crate::error::Result;
use crate::tensor::fft::{irfft, rfft};

/// Shift `u` by `shift` (domain units) to the right: `v(x) = u(x - shift)`.
///
/// Whole-cell shifts are exact rolls; otherwise the shift is a Fourier phase
/// rotation, exact for band-limited input.
pub(crate) fn periodic_shift(u: &[f64], shift: f64, length: f64) -> Result<Vec<f64>> {
    let n = u.len();
    let cells = shift / length * n as f64;
    let rounded = cells.round();
    if (cells - rounded).abs() < 1e-9 {
        let s = (rounded as i64).rem_euclid(n as i64) as usize;
        let mut out = vec![0.0; n];
        for (j, v) in u.iter().enumerate() {
            out[(j + s) % n] = *v;
        }
        return Ok(out);
    }
    let mut spec = rfft(u)?;
    for (k, b) in spec.iter_mut().enumerate() {
        let phase = -2.0 * PI * k as f64 * shift / length;
        *b *= Complex64::from_polar(1.0, phase);
    }
    irfft(&spec, n)
}

/// Exact solution `u(t, x) = u0(x - beta t)` sampled at the stored steps.
pub fn solve_advection(u0: &[f64], beta: f64, grid: &Grid1D) -> Result<Trajectory> {
    grid.validate()?;
    let params = PdeParams::new(PdeKind::Advection, beta)?;
    let mut u = Vec::with_capacity((grid.n_t + 1) * grid.n_x);
    u.extend_from_slice(u0);
    for k in 1..=grid.n_t {
        let t = k as f64 * grid.dt;
        u.extend(periodic_shift(u0, beta * t, grid.length)?);
    }
    Ok(Trajectory {
        grid: *grid,
        params,
        u,
    })
}
