//! Backward pass against central finite differences, op by op and through
//! the assembled separation graphs.

mod common;

use common::suites::{self, Cases};

const TOL: f64 = 1e-4;

fn assert_all(cases: Cases) {
    assert!(!cases.is_empty());
    for (name, err) in cases {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn convolutions_and_dense() {
    assert_all(suites::conv_cases());
}

#[test]
fn elementwise_and_reductions() {
    assert_all(suites::elementwise_cases());
}

#[test]
fn pooling_layout_istft_and_losses() {
    assert_all(suites::layout_cases());
}

/// Full mixture-to-loss graph, every trainable tensor, every front-end.
#[test]
fn end_to_end_graphs() {
    let cases = suites::end_to_end_cases();
    // 3 front-ends x 2 losses, plus the dropout pass.
    assert!(cases.len() >= 6 * 9);
    assert_all(cases);
}
