//! Finite-difference checks of every tape primitive and of the full denoiser.

mod common;

use common::gradcases::run;

const SEEDS: u64 = 20;

fn assert_case(name: &str) {
    let failures = run(name, SEEDS);
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn elementwise_and_broadcast() {
    assert_case("elementwise_and_broadcast");
}

#[test]
fn matmul() {
    assert_case("matmul");
}

#[test]
fn mse_under_matmul_chain_is_tight() {
    assert_case("mse_under_matmul_chain");
}

#[test]
fn conv1d() {
    assert_case("conv1d");
}

#[test]
fn conv_transpose1d() {
    assert_case("conv_transpose1d");
}

#[test]
fn group_norm() {
    assert_case("group_norm");
}

#[test]
fn activations() {
    assert_case("activations");
}

#[test]
fn structural_ops() {
    assert_case("structural_ops");
}

#[test]
fn reductions_and_loss() {
    assert_case("reductions_and_loss");
}

#[test]
fn full_denoiser_width8() {
    assert_case("full_denoiser_width8");
}
