//! Built only with `--features fault-round-half-away`, which swaps ties-to-even
//! rounding for half-away-from-zero. The equivalence suite must notice.

use codeq::pruning::equivalence_mismatch;
use codeq::quantizers::pruning_aware_scale;
use codeq::verify::{equivalence_suite, run_all};

#[test]
fn equivalence_suite_reports_the_boundary() {
    let result = equivalence_suite(0, 10_000).unwrap();
    assert!(!result.passed());
    let ce = result.counterexample.unwrap();
    assert!(ce.contains("|w| == d/2"), "{ce}");
    assert!(ce.contains("reproduces as a 1-element tensor: true"), "{ce}");
    assert!(result.checked < 100, "caught only after {} trials", result.checked);
}

#[test]
fn single_boundary_weight_is_kept() {
    let (r, d) = (1.0, 0.6);
    let s = pruning_aware_scale(r, d, 4, 1e-8).unwrap();
    let m = equivalence_mismatch(&[d / 2.0], s, d, 4).unwrap().unwrap();
    assert!(m.reconstruction != 0.0 && !m.mask_keeps);
}

#[test]
fn verify_exits_with_a_failure() {
    assert!(!run_all(0, 100).unwrap().passed());
}
