use popgraph::fixtures::{model_gradchecks, primitive_gradchecks};

#[test]
fn every_primitive_passes_finite_differences() {
    for seed in 0..3 {
        for (name, report) in primitive_gradchecks(seed).unwrap() {
            assert!(report.passed(), "{name} (seed {seed}): max rel error {}", report.max_rel_error);
        }
    }
}

#[test]
fn end_to_end_losses_pass_finite_differences() {
    let reports = model_gradchecks().unwrap();
    assert_eq!(reports.len(), 12);
    for (name, report) in reports {
        assert!(report.passed(), "{name}: max rel error {}", report.max_rel_error);
    }
}
