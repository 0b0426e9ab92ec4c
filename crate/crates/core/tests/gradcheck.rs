use chain_core::diagnostics::gradcheck_all;

#[test]
fn every_variant_matches_finite_differences() {
    let reports = gradcheck_all(100, 1e-5, 2024).unwrap();
    for r in &reports {
        println!(
            "{:<12} {:<8} worst {:.3e} failures {}",
            r.variant.name(),
            r.mode.name(),
            r.worst_rel_err,
            r.failures
        );
    }
    assert!(reports.iter().all(|r| r.passed()));
}
