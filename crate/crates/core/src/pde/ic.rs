use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Grid1D;

pub const IC_MODES: usize = 4;
pub const IC_MAX_WAVENUMBER: usize = 4;

/// Random band-limited periodic field: a sum of [`IC_MODES`] sinusoids with
/// wavenumbers in `1..=IC_MAX_WAVENUMBER`, shifted to zero mean and scaled
/// to unit max-abs.
pub fn sample_initial_condition(seed: u64, grid: &Grid1D) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64)> = (0..IC_MODES)
        .map(|_| {
            let k = rng.random_range(1..=IC_MAX_WAVENUMBER) as f64;
            let amp = rng.random_range(0.0..1.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            (k, amp, phase)
        })
        .collect();
    let mut u: Vec<f64> = grid
        .coords()
        .iter()
        .map(|&x| {
            waves
                .iter()
                .map(|&(k, a, p)| a * (2.0 * PI * k * x / grid.length + p).sin())
                .sum()
        })
        .collect();
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    u.iter_mut().for_each(|v| *v -= mean);
    let peak = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        u.iter_mut().for_each(|v| *v /= peak);
    }
    u
}
