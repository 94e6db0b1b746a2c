use super::array::Tensor;
use super::params::{Bound, ParamSet};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Largest `|analytic - central_fd| / max(1, |analytic|)` over the entries
/// of `x`, for a scalar-valued `f`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let l = f(&mut t, v)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0f64;
    for j in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[j] += h;
        let mut minus = x.clone();
        minus.data_mut()[j] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[j], fd));
    }
    Ok(worst)
}

/// [`grad_check`] over every entry of every tensor in `params`.
pub fn grad_check_params<F>(f: F, params: &ParamSet, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    tape.backward(loss)?;
    let grads = bound.grads(&tape);

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let b = p.bind_frozen(&mut t);
        let l = f(&mut t, &b)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (id, _, value) in params.iter() {
        for j in 0..value.numel() {
            let orig = value.data()[j];
            probe.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grads[id.0].as_ref().map_or(0.0, |g| g.data()[j]);
            worst = worst.max(rel_err(a, fd));
        }
    }
    Ok(worst)
}
