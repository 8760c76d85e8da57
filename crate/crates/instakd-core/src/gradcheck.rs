//! Central finite-difference gradient checking.

use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Numerical gradient of a scalar function w.r.t. `x` by central differences:
/// (f(x+eps) - f(x-eps)) / (2 eps), one coordinate at a time.
pub fn numerical_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64, eps: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.dims());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
    }
    grad
}

/// Worst relative error between analytic and numerical gradients.
///
/// Per element: |a - n| / max(|a|, |n|, floor). The floor keeps near-zero
/// coordinates from inflating the ratio with finite-difference noise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Convenience: check an analytic gradient against central differences and
/// panic with a diagnostic when the relative error exceeds `tol`.
pub fn assert_grad_matches(
    name: &str,
    x: &Tensor,
    analytic: &Tensor,
    f: impl Fn(&Tensor) -> f64,
    tol: f64,
) {
    let numeric = numerical_grad(x, f, DEFAULT_EPS);
    let err = max_rel_err(analytic.data(), numeric.data(), 1e-6);
    assert!(
        err < tol,
        "{name}: gradient mismatch, max rel err {err:.3e} >= tol {tol:.1e}"
    );
}
