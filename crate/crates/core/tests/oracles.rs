//! Brute-force reference implementations checked against the library ops.

mod support;

use support::oracles;

fn check(c: oracles::Check) {
    assert!(
        c.passed(),
        "{}: {} instances, max error {:e}",
        c.name,
        c.instances,
        c.max_err
    );
}

#[test]
fn conv2d_matches_nested_loops() {
    check(oracles::conv2d(1));
}

#[test]
fn linear_matches_triple_loop() {
    check(oracles::linear(2));
}

#[test]
fn bilinear_sample_matches_tent_sum() {
    check(oracles::bilinear_sample(3));
}

#[test]
fn roi_align_matches_per_sample_loop() {
    check(oracles::roi_align_op(4));
}

#[test]
fn nms_matches_quadratic_oracle() {
    check(oracles::nms_op(5));
}

#[test]
fn distillation_losses_match_flat_loops() {
    for c in oracles::distillation(6) {
        check(c);
    }
}

#[test]
fn full_suite_on_another_seed() {
    let checks = oracles::all(100);
    assert_eq!(checks.len(), 8);
    checks.into_iter().for_each(check);
}
