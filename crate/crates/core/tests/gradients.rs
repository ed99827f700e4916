use tam_core::analysis::gradcheck::{self, DEFAULT_TOLERANCE, OPS};

#[test]
fn every_operator_passes_finite_differences_on_five_seeds() {
    let seeds: Vec<u64> = (0..5).collect();
    let reports = gradcheck::suite(OPS, &seeds, DEFAULT_TOLERANCE).unwrap();
    assert_eq!(reports.len(), OPS.len() * seeds.len());
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{} seed {}: {:.3e}", r.op, r.seed, r.max_rel_error))
        .collect();
    assert!(failed.is_empty(), "failing checks: {failed:?}");
}

#[test]
fn unknown_operator_lists_valid_names() {
    let err = gradcheck::case("bogus", 0).err().unwrap().to_string();
    assert!(err.contains("adaptive") || err.contains("aggregate"), "{err}");
}

#[test]
fn a_wrong_gradient_would_be_caught() {
    // Relative error of identical vectors is zero, of disjoint ones is large.
    assert_eq!(gradcheck::relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert!(gradcheck::relative_error(&[1.0, 2.0], &[1.0, 2.5]) > 0.1);
}
