//! Viscous Burgers, `u_t + (u^2/2)_x = (nu/pi) u_xx`, on a periodic domain.
//!
//! Conservative finite volumes on an oversampled grid: MUSCL reconstruction
//! with a monotonized-central limiter, local Lax-Friedrichs flux for the
//! convective term, central differences for diffusion, and SSP-RK2 in time.
//! Stored frames are box averages of the fine cells.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{Grid1D, PdeKind, PdeParams, Trajectory};
use crate::error::{config_err, Result};
use crate::tensor::fft::{irfft, rfft};

/// Upper bound on fine time steps per trajectory.
pub const MAX_SUBSTEPS: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurgersSolver {
    /// Fine cells per stored cell.
    pub oversample: usize,
    /// Safety factor on the explicit stability limits.
    pub cfl: f64,
}

impl Default for BurgersSolver {
    fn default() -> Self {
        Self {
            oversample: 8,
            cfl: 0.4,
        }
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        x.sin() / x
    }
}

fn mc_limiter(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        return 0.0;
    }
    let m = (2.0 * a.abs()).min(2.0 * b.abs()).min(0.5 * (a + b).abs());
    m * a.signum()
}

/// Fine-cell averages of the band-limited field whose coarse-cell averages
/// are `u0`. Coarse cell `j` is centred on `x_j = j dx`.
pub(crate) fn refine_initial(u0: &[f64], oversample: usize) -> Result<Vec<f64>> {
    let n = u0.len();
    let fine = n * oversample;
    let spec = rfft(u0)?;
    let mut fspec = vec![Complex64::new(0.0, 0.0); fine / 2 + 1];
    let r = oversample as f64;
    // fine cell 0 centre sits at -dx/2 + dx_f/2 (domain length 1 units)
    let offset = (0.5 / r - 0.5) / n as f64;
    for k in 0..n / 2 {
        let kf = k as f64;
        let ratio = sinc(PI * kf / fine as f64) / sinc(PI * kf / n as f64);
        let phase = Complex64::from_polar(1.0, 2.0 * PI * kf * offset);
        fspec[k] = spec[k] * (r * ratio) * phase;
    }
    irfft(&fspec, fine)
}

fn box_average(fine: &[f64], oversample: usize, out: &mut Vec<f64>) {
    let r = oversample as f64;
    out.extend(fine.chunks(oversample).map(|c| c.iter().sum::<f64>() / r));
}

struct Workspace {
    slope: Vec<f64>,
    flux: Vec<f64>,
    rhs: Vec<f64>,
    stage: Vec<f64>,
}

impl BurgersSolver {
    fn stable_dt(&self, max_u: f64, dx: f64, diffusivity: f64) -> f64 {
        let adv = if max_u > 0.0 {
            dx / max_u
        } else {
            f64::INFINITY
        };
        let diff = dx * dx / (2.0 * diffusivity);
        self.cfl * adv.min(diff)
    }

    fn rhs(u: &[f64], dx: f64, diffusivity: f64, ws: &mut Workspace) {
        let n = u.len();
        for i in 0..n {
            let left = u[i] - u[(i + n - 1) % n];
            let right = u[(i + 1) % n] - u[i];
            ws.slope[i] = mc_limiter(left, right);
        }
        // flux[i] lives on the interface between cells i and i+1
        for i in 0..n {
            let ip = (i + 1) % n;
            let ul = u[i] + 0.5 * ws.slope[i];
            let ur = u[ip] - 0.5 * ws.slope[ip];
            let a = ul.abs().max(ur.abs());
            let conv = 0.25 * (ul * ul + ur * ur) - 0.5 * a * (ur - ul);
            let diff = -diffusivity * (u[ip] - u[i]) / dx;
            ws.flux[i] = conv + diff;
        }
        for i in 0..n {
            ws.rhs[i] = -(ws.flux[i] - ws.flux[(i + n - 1) % n]) / dx;
        }
    }

    /// Integrate from `u0` (coarse values) and store `grid.n_t` frames.
    pub fn solve(&self, u0: &[f64], nu: f64, grid: &Grid1D) -> Result<Trajectory> {
        grid.validate()?;
        let params = PdeParams::new(PdeKind::Burgers, nu)?;
        if self.oversample == 0 || !self.oversample.is_power_of_two() {
            return config_err("oversample must be a power of two");
        }
        if u0.len() != grid.n_x {
            return config_err(format!(
                "initial condition has {} sites, grid has {}",
                u0.len(),
                grid.n_x
            ));
        }
        let diffusivity = nu / PI;
        let fine_n = grid.n_x * self.oversample;
        let dx = grid.length / fine_n as f64;
        let max0 = u0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // max|u| cannot grow, so the initial step is the smallest one
        let substeps = grid.final_time() / self.stable_dt(max0 * 1.05, dx, diffusivity);
        if substeps > MAX_SUBSTEPS {
            return config_err(format!(
                "nu = {nu} needs ~{substeps:.3e} substeps (limit {MAX_SUBSTEPS:e})"
            ));
        }

        let mut u = refine_initial(u0, self.oversample)?;
        let mut ws = Workspace {
            slope: vec![0.0; fine_n],
            flux: vec![0.0; fine_n],
            rhs: vec![0.0; fine_n],
            stage: vec![0.0; fine_n],
        };
        let mut out = Vec::with_capacity((grid.n_t + 1) * grid.n_x);
        out.extend_from_slice(u0);
        let mut t = 0.0;
        for k in 1..=grid.n_t {
            let target = k as f64 * grid.dt;
            while t < target - 1e-13 {
                let max_u = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let h = self.stable_dt(max_u, dx, diffusivity).min(target - t);
                Self::rhs(&u, dx, diffusivity, &mut ws);
                for ((s, &ui), &r) in ws.stage.iter_mut().zip(&u).zip(&ws.rhs) {
                    *s = ui + h * r;
                }
                let stage = std::mem::take(&mut ws.stage);
                Self::rhs(&stage, dx, diffusivity, &mut ws);
                for i in 0..fine_n {
                    u[i] = 0.5 * (u[i] + stage[i] + h * ws.rhs[i]);
                }
                ws.stage = stage;
                t += h;
            }
            t = target;
            if !u.iter().all(|v| v.is_finite()) {
                return Err(crate::Error::Numeric(format!(
                    "Burgers solver blew up before t = {target}"
                )));
            }
            box_average(&u, self.oversample, &mut out);
        }
        Ok(Trajectory {
            grid: *grid,
            params,
            u: out,
        })
    }
}

/// [`BurgersSolver::solve`] with the default 8x oversampling.
pub fn solve_burgers(u0: &[f64], nu: f64, grid: &Grid1D) -> Result<Trajectory> {
    BurgersSolver::default().solve(u0, nu, grid)
}
