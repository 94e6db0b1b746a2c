/// Curriculum transition index for epoch `n` of `epochs`:
/// `floor(n_t/2 * (1 + tanh((n/epochs - 1/2) / delta)))`, clamped to
/// `[0, n_t - 1]`. Steps `k <= k_trans` feed the model its own prediction.
pub fn k_trans(n: usize, epochs: usize, n_t: usize, delta: f64) -> usize {
    if n_t == 0 {
        return 0;
    }
    let frac = n as f64 / epochs.max(1) as f64;
    let raw = (n_t as f64 / 2.0 * (1.0 + ((frac - 0.5) / delta).tanh())).floor();
    (raw.max(0.0) as usize).min(n_t - 1)
}

/// `lr0 * 0.5^floor(epoch / halve_every)`.
pub fn learning_rate(lr0: f64, epoch: usize, halve_every: usize) -> f64 {
    if halve_every == 0 {
        return lr0;
    }
    lr0 * 0.5f64.powi((epoch / halve_every) as i32)
}
