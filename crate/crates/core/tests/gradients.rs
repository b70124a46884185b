use facenas_core::gradcheck::operator_suite;

#[test]
fn every_operator_matches_finite_differences() {
    let report = operator_suite(100, 2024).unwrap();
    for (op, err) in &report {
        assert!(*err < 1e-4, "{op}: relative error {err:e}");
    }
    assert!(report.len() >= 30);
}
