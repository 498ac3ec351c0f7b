//! Reverse-mode gradients against central finite differences in f64.

mod common;

use common::*;

#[test]
fn every_op_matches_finite_differences() {
    for (name, f, make) in op_table() {
        let worst = op_worst(&*f, &*make);
        assert!(worst <= GRAD_TOL, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn stop_gradient_matches_closed_form() {
    assert!(stop_gradient_worst() <= GRAD_TOL);
}

#[test]
fn full_denoiser() {
    let worst = denoiser_worst();
    assert!(worst <= GRAD_TOL, "denoiser: max relative error {worst:e}");
}

#[test]
fn perceptual_distance() {
    let worst = perceptual_worst();
    assert!(worst <= GRAD_TOL, "perceptual: max relative error {worst:e}");
}
