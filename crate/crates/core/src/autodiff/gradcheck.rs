use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of a scalar function.
pub fn finite_difference_grad(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_grad",
            });
        }
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Five-point central-difference estimate, `O(h^4)` truncation error.
pub fn five_point_grad(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut at = |d: f64| {
            probe.data_mut()[i] = orig + d;
            f(&probe)
        };
        let (m2, m1, p1, p2) = (at(-2.0 * h)?, at(-h)?, at(h)?, at(2.0 * h)?);
        probe.data_mut()[i] = orig;
        if ![m2, m1, p1, p2].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "five_point_grad",
            });
        }
        grad.data_mut()[i] = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
    }
    Ok(grad)
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error_with_floor(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Largest elementwise relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
