//! Reverse-mode gradients against central finite differences.
//!
//! Every primitive is checked on 100 random seeds, and the full detection loss
//! on a tiny model with the assignment held fixed at the base point. Inputs to
//! non-smooth ops are sampled away from their kinks.

mod support;

use support::fd;

#[test]
fn elementwise_binary() {
    fd::elementwise_binary();
}

#[test]
fn elementwise_unary() {
    fd::elementwise_unary();
}

#[test]
fn linear_algebra() {
    fd::linear_algebra();
}

#[test]
fn normalization() {
    fd::normalization();
}

#[test]
fn shape_ops() {
    fd::shape_ops();
}

#[test]
fn convolution() {
    fd::convolution();
}

#[test]
fn attention() {
    fd::attention();
}

#[test]
fn box_regression() {
    fd::box_regression();
}

#[test]
fn full_model_loss() {
    fd::full_model_loss();
}
