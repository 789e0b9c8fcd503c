mod common;

use common::{composite_errors, primitive_errors, FD_TOLERANCE};

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, worst, n) in primitive_errors(10) {
        assert_eq!(n, 10);
        assert!(worst < FD_TOLERANCE, "{name}: relative error {worst:e}");
    }
}

#[test]
fn composed_loss_matches_finite_differences() {
    let (worst, n, skipped) = composite_errors(10);
    assert_eq!(n, 10);
    assert!(skipped < 10, "{skipped} draws rejected near kinks");
    assert!(worst < FD_TOLERANCE, "relative error {worst:e}");
}
