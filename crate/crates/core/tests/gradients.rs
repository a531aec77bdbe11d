//! Finite-difference checks for every differentiable op of the tape.

#[path = "support/grad_suite.rs"]
#[allow(dead_code)]
mod grad_suite;

use grad_suite::Outcome;

fn assert_all(outcomes: Vec<Outcome>) {
    assert!(!outcomes.is_empty());
    for o in &outcomes {
        assert!(
            o.ok(),
            "{}: max rel err {:.2e} > {:.0e}",
            o.name,
            o.max_rel_err,
            o.tol
        );
    }
}

#[test]
fn matmul_and_bmm() {
    assert_all(grad_suite::matmul_and_bmm());
}

#[test]
fn elementwise() {
    assert_all(grad_suite::elementwise());
}

#[test]
fn unary_ops() {
    assert_all(grad_suite::unary_ops());
}

#[test]
fn softmax_layer_norm_embedding_ce() {
    assert_all(grad_suite::softmax_layer_norm_embedding_ce());
}

#[test]
fn convolutions() {
    assert_all(grad_suite::convolutions());
}

#[test]
fn shape_ops_and_rope() {
    assert_all(grad_suite::shape_ops_and_rope());
}

#[test]
fn two_layer_mlp() {
    assert_all(grad_suite::two_layer_mlp());
}

#[test]
fn small_transformer() {
    assert_all(grad_suite::small_transformer());
}

#[test]
fn stft_magnitude_and_multiscale_loss() {
    assert_all(grad_suite::stft_magnitude_and_multiscale_loss());
}
