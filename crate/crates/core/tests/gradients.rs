use pamr_core::checks::{end_to_end_check, gradient_suite, END_TO_END_TOL};
use pamr_core::tensor::GradCheckConfig;
use pamr_core::BackboneConfig;

#[test]
fn full_suite_passes() {
    let suite = gradient_suite(&BackboneConfig::tiny(), 1).unwrap();
    for e in &suite {
        assert!(e.report.passed(), "{}: max rel err {:.3e}", e.name, e.report.max_rel_err());
    }
    assert!(suite.len() > 25);
}

#[test]
fn end_to_end_with_zero_scale_head() {
    let mut cfg = BackboneConfig::tiny();
    cfg.zero_scale_head = true;
    let check = GradCheckConfig { tol: END_TO_END_TOL, max_entries_per_param: Some(6), ..GradCheckConfig::default() };
    let r = end_to_end_check(&cfg, &check, 3).unwrap();
    assert!(r.passed(), "max rel err {:.3e}", r.max_rel_err());
}
