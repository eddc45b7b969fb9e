//! Carry-forward aggregation against a brute-force table replay.

mod support;

use proptest::prelude::*;
use support::aggregation::{check, Pass};

fn scenario() -> impl Strategy<Value = (usize, usize, Vec<Pass>)> {
    (1usize..=100, 1usize..=10).prop_flat_map(|(users, options)| {
        let pass = (0usize..4, 0u64..3, prop::collection::vec((0..users, 0..options, -3i8..=3), 0..40))
            .prop_map(|(room, dt, labels)| Pass { room, dt, labels });
        (Just(users), Just(options), prop::collection::vec(pass, 0..30))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_brute_force((users, options, passes) in scenario()) {
        if let Err(e) = check(users, options, &passes) {
            return Err(TestCaseError::fail(e));
        }
    }
}

#[test]
fn ties_go_to_the_smaller_label() {
    // opt2 and opt1 tie on every measure.
    let passes = vec![Pass { room: 0, dt: 1, labels: vec![(0, 0, 2), (0, 1, 2)] }];
    check(1, 2, &passes).unwrap();
}
