use xattnres::experiment::run_gradcheck_suite;
use xattnres::tensor::fault::set_conv_backward_fault;

#[test]
fn suite_passes_and_covers_enough_operations() {
    let report = run_gradcheck_suite().unwrap();
    assert!(report.passed(), "{}", report.render());
    assert!(report.checks.len() >= 10);
    assert!(report.max_rel_error() < 1e-4);
}

#[test]
fn corrupted_conv_backward_is_named() {
    set_conv_backward_fault(1.01);
    let report = run_gradcheck_suite();
    set_conv_backward_fault(1.0);
    let report = report.unwrap();
    let failures = report.failures();
    assert!(!report.passed());
    for name in ["conv3x3_same", "conv3x3_valid", "conv1x1", "backbone_both"] {
        assert!(failures.contains(&name), "{name} missing from {failures:?}");
    }
    for name in ["softmax_axis0", "rmsnorm_channels", "cross_entropy"] {
        assert!(!failures.contains(&name), "{name} should be unaffected");
    }
    assert!(report.render().contains("FAILED: conv3x3_same"));
}
