//! End-to-end gradient verification against central finite differences.

mod common;

#[test]
fn randomized_instances_match_finite_differences() {
    let checked = common::gradient_suite(20, 1234).unwrap();
    assert_eq!(checked, 20);
}
