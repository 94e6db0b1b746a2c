//! Normalized RMSE, `||pred - truth|| / ||truth||` over all elements.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub fn nrmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return shape_err(format!(
            "nrmse shapes differ: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        ));
    }
    let den = truth.norm();
    if den == 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let num = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

/// Differentiable [`nrmse`].
pub fn nrmse_var(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    if tape.value(truth).norm() == 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let diff = tape.sub(pred, truth)?;
    let num = tape.norm(diff)?;
    let den = tape.norm(truth)?;
    tape.div(num, den)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let t = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(nrmse(&t, &t).unwrap(), 0.0);
        let two = Tensor::from_vec(t.data().iter().map(|v| 2.0 * v).collect());
        assert!((nrmse(&two, &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((nrmse(&Tensor::zeros(&[3]), &t).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            nrmse(&t, &Tensor::zeros(&[3])),
            Err(Error::DegenerateTarget)
        ));
    }

    #[test]
    fn tape_version_agrees() {
        let p = Tensor::from_vec(vec![0.5, 1.0, -1.0, 2.0]);
        let t = Tensor::from_vec(vec![1.0, 1.5, -0.5, 2.5]);
        let mut tape = Tape::new();
        let (pv, tv) = (tape.constant(p.clone()), tape.constant(t.clone()));
        let l = nrmse_var(&mut tape, pv, tv).unwrap();
        assert_eq!(tape.value(l).item(), nrmse(&p, &t).unwrap());
    }
}
