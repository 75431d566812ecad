//! Analytic gradients of the full training loss against central differences.

mod common;

use common::max_relative_gradient_error;

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let (err, at) = max_relative_gradient_error(true);
    assert!(err < 1e-4, "max relative error {err:e} at {at}");
}

#[test]
fn reconstruction_only_gradient_matches_finite_differences() {
    let (err, at) = max_relative_gradient_error(false);
    assert!(err < 1e-4, "max relative error {err:e} at {at}");
}
