use prefixrep::gradcheck::{run_gradient_suite, GRADCHECK_TOLERANCE};

#[test]
fn every_operation_and_training_loss_matches_finite_differences() {
    let cases = run_gradient_suite(None).unwrap();
    assert!(cases.len() >= 23);
    for c in &cases {
        assert!(c.coords_checked > 0, "{}", c.name);
        assert!(c.max_rel_error <= GRADCHECK_TOLERANCE, "{}: {:e}", c.name, c.max_rel_error);
    }
}
