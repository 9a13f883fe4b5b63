//! Central finite-difference gradient verification.
//!
//! Treats the loss as a black box over a [`ParamStore<f64>`], so it stays
//! independent of the tape-based backward pass it is used to check.

use crate::params::{ParamId, ParamStore};

/// Central-difference gradient of `loss` with respect to every element of
/// parameter `id`, at step size `step`.
pub fn finite_difference_grad<F>(
    store: &mut ParamStore<f64>,
    id: ParamId,
    step: f64,
    mut loss: F,
) -> Vec<f64>
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    let n = store.get(id).len();
    let mut grad = vec![0.0; n];
    for e in 0..n {
        let orig = store.get(id).data()[e];
        store.get_mut(id).data_mut()[e] = orig + step;
        let up = loss(store);
        store.get_mut(id).data_mut()[e] = orig - step;
        let down = loss(store);
        store.get_mut(id).data_mut()[e] = orig;
        grad[e] = (up - down) / (2.0 * step);
    }
    grad
}

/// Relative error with a floor on the denominator so near-zero gradient
/// pairs are compared on an absolute scale.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error between an analytic gradient and its
/// finite-difference counterpart.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b, floor))
        .fold(0.0, f64::max)
}
