mod support;

use support::gradcheck::{loss_input_checks, network_checks};

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..3 {
        for r in loss_input_checks(seed) {
            assert!(r.coords >= 100);
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }
}

#[test]
fn network_gradients_match_finite_differences() {
    for r in network_checks(7) {
        assert!(r.coords >= 100);
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }
}
