mod common;

use common::gradients::{all_checks, TOLERANCE};

#[test]
fn backprop_matches_central_differences() {
    for (name, r) in all_checks() {
        let err = r.unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(err <= TOLERANCE, "{name}: relative error {err:e}");
    }
}
