mod common;

#[test]
fn joint_loss_gradients_match_finite_differences() {
    for seed in [3, 17] {
        let r = common::joint_gradient_report(1.0, seed);
        assert!(r.checked > 1000, "only {} coordinates checked", r.checked);
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn conventional_loss_gradients_match_finite_differences() {
    let r = common::joint_gradient_report(0.0, 5);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn large_lambda_gradients_match_finite_differences() {
    let r = common::joint_gradient_report(3.0, 23);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
