//! Central finite-difference checking of input gradients.
//!
//! Only the forward evaluation is used here, so the check stays independent
//! of the reverse-mode path it validates.

use crate::error::Result;
use crate::model::Differentiable;
use crate::tensor::Tensor;

/// Central finite-difference gradient of output `k` at `x`.
pub fn central_difference_gradient<F: Differentiable>(
    f: &F,
    x: &Tensor,
    k: usize,
    step: f64,
) -> Result<Tensor> {
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.data().to_vec();
    for j in 0..x.numel() {
        let orig = probe[j];
        probe[j] = orig + step;
        let plus = f.outputs(&Tensor::from_vec(x.shape().to_vec(), probe.clone())?)?[k];
        probe[j] = orig - step;
        let minus = f.outputs(&Tensor::from_vec(x.shape().to_vec(), probe.clone())?)?[k];
        probe[j] = orig;
        grad[j] = (plus - minus) / (2.0 * step);
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}

/// Worst relative deviation between the analytic and finite-difference
/// gradients, `|a - n| / max(1, |n|)` over components.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compare reverse-mode and finite-difference gradients of output `k` at `x`.
pub fn check_input_gradient<F: Differentiable>(
    f: &F,
    x: &Tensor,
    k: usize,
    step: f64,
) -> Result<f64> {
    let analytic = f.input_gradient(x, k)?;
    let numeric = central_difference_gradient(f, x, k, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}
