//! Finite-difference check of the full proxy loss, backbone included, in f64.

mod common;

use common::grad::{group_errors, Setup, GROUPS};

fn assert_within(errors: &[(String, f64)]) {
    for (group, err) in errors {
        assert!(*err <= 1e-4, "{group}: relative error {err:e}");
    }
}

#[test]
fn attention_pooling_loss_gradients_match_finite_differences() {
    let errors = group_errors(&Setup::new("icmlm_attfc", 1), GROUPS[0].1);
    assert_within(&errors);
    let bh = &errors.iter().find(|(g, _)| g == "b_h").unwrap();
    assert!(bh.1 < 1e-9);
}

#[test]
fn transformer_loss_gradients_match_finite_differences() {
    let errors = group_errors(&Setup::new("icmlm_tfm", 2), GROUPS[1].1);
    assert_within(&errors);
}

#[test]
fn tag_prediction_loss_gradients_match_finite_differences() {
    let errors = group_errors(&Setup::new("tp_postag", 3), GROUPS[2].1);
    assert_within(&errors);
}
