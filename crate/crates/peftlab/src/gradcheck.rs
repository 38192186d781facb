//! Central-difference gradient oracle.
//!
//! Kept independent of the tape: the closure under test is free to build
//! whatever graph it wants, but this module only ever sees scalar outputs.

use crate::tensor::Tensor;

/// Default central-difference step. Gradient-check tolerances in the test
/// suites assume this step in f64.
pub const DEFAULT_H: f64 = 1e-6;

/// Central finite differences of a scalar-valued function at `at`:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad(f: &mut dyn FnMut(&Tensor) -> f64, at: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite_diff_grad requires h > 0");
    let n = at.numel();
    let mut grad = vec![0.0; n];
    for (i, slot) in grad.iter_mut().enumerate() {
        let mut plus = at.clone();
        plus.data_mut()[i] += h;
        let mut minus = at.clone();
        minus.data_mut()[i] -= h;
        *slot = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    Tensor::new(at.shape().to_vec(), grad).expect("same shape as input")
}

/// Largest relative error between analytic and numeric gradients, with a
/// small absolute floor so zero gradients compare cleanly.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
