mod common;

use common::REL_TOL;

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, err) in common::primitive_checks() {
        assert!(err < REL_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn composed_language_model_matches_finite_differences() {
    let err = common::tiny_lm_check();
    assert!(err < REL_TOL, "relative error {err:e}");
}

#[test]
fn classifier_head_matches_finite_differences() {
    let err = common::tiny_head_check();
    assert!(err < REL_TOL, "relative error {err:e}");
}
