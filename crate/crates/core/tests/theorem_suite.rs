use chain_core::theorems::{run_suite, CSV_HEADER};

#[test]
fn full_suite_passes() {
    let reports = run_suite(0);
    println!("{CSV_HEADER}");
    for r in &reports {
        println!("{}", r.csv_row());
    }
    assert_eq!(reports.len(), 5);
    for r in &reports {
        assert!(r.passed(), "{r}");
    }
}
