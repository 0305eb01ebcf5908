//! Analytic ray gradients against central finite differences.

mod common;

#[test]
fn backward_matches_central_differences() {
    let r = common::fd::check(120, 2024, 1e-4, 1e-3, 1e-6);
    assert!(r.failures.is_empty(), "{:#?}", &r.failures[..r.failures.len().min(5)]);
    assert!(r.checked > 1000, "only {} gradient entries checked", r.checked);
}
