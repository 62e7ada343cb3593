//! Central-finite-difference validation of analytic gradients.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Compare the analytic gradient of a scalar-valued function against central
/// finite differences at `point`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let probe = Tensor::param(point.shape(), point.to_vec())?;
    grad_check_params(|tape| f(tape, &probe), &[probe.clone()], eps)
}

/// Multi-parameter variant of [`grad_check`]: `f` closes over `params` and
/// rebuilds the forward computation on each call. Parameter data is perturbed
/// in place for the finite-difference evaluations and restored afterwards.
pub fn grad_check_params<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::contract(format!(
            "grad_check eps must be in (0, 1e-3], got {eps}"
        )));
    }
    for p in params {
        if !p.requires_grad() {
            return Err(Error::contract(
                "grad_check_params needs requires_grad parameters",
            ));
        }
        p.zero_grad();
    }

    let tape = Tape::new();
    let loss = f(&tape)?;
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check requires a scalar function, got shape {:?}",
            loss.shape()
        )));
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |f: &F| -> Result<f64> {
        let tape = Tape::no_grad();
        let out = f(&tape)?;
        Ok(out.item())
    };

    let mut worst: f64 = 0.0;
    for (p, grads) in params.iter().zip(&analytic) {
        for i in 0..p.numel() {
            let original = p.data()[i];
            p.update_data(|d| d[i] = original + eps);
            let plus = eval(&f)?;
            p.update_data(|d| d[i] = original - eps);
            let minus = eval(&f)?;
            p.update_data(|d| d[i] = original);
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grads[i] - numeric).abs() / numeric.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
