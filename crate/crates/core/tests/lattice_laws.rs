mod common;

use common::{check_laws, shapes, triple};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

#[test]
fn laws_hold_for_every_variant() {
    for shape in shapes() {
        let mut runner = TestRunner::new(Config::with_cases(1000));
        runner
            .run(&triple(&shape), |(a, b, c)| {
                check_laws(&a, &b, &c).map_err(TestCaseError::fail)
            })
            .unwrap_or_else(|e| panic!("{shape}: {e}"));
    }
}

proptest! {
    #[test]
    fn mismatched_shapes_never_merge(a in common::value(&pact_core::lattice::Shape::MaxInt),
                                     b in common::value(&pact_core::lattice::Shape::SetUnion)) {
        prop_assert!(pact_core::lattice::merge(&a, &b).is_err());
        prop_assert!(pact_core::lattice::leq(&a, &b).is_err());
    }
}
