//! Central finite-difference gradient checking.
//!
//! These helpers only run forward passes; they stay independent of the
//! backward rules they are used to verify.

use super::{Scalar, Tensor};

/// Default perturbation for 64-bit checks.
pub const FD_STEP: f64 = 1e-4;

/// Central-difference gradient of `loss_fn` w.r.t. every element of
/// `param`, perturbing elements in place and restoring them.
pub fn finite_diff_grad<T: Scalar>(
    param: &Tensor<T>,
    h: f64,
    mut loss_fn: impl FnMut() -> f64,
) -> Vec<f64> {
    let n = param.numel();
    let mut grads = Vec::with_capacity(n);
    let step = T::from_f64(h);
    for i in 0..n {
        let orig = param.data()[i];
        param.data_mut()[i] = orig + step;
        let plus = loss_fn();
        param.data_mut()[i] = orig - step;
        let minus = loss_fn();
        param.data_mut()[i] = orig;
        grads.push((plus - minus) / (2.0 * h));
    }
    grads
}

/// Relative error with a floor so near-zero gradients compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-6, f64::max(a.abs(), b.abs()))
}

/// Max relative error between an analytic gradient and its
/// finite-difference counterpart.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
