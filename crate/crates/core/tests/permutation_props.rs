mod common;

use dcn::destruction::{GridSpec, Permutation};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn destruction_round_trips_and_co_transforms(seed in any::<u64>()) {
        prop_assert_eq!(common::check_permutation_instance(seed), Ok(()));
    }

    #[test]
    fn composition_is_associative_and_inverse_is_involutive(
        a in Just((0..9).collect::<Vec<usize>>()).prop_shuffle(),
        b in Just((0..9).collect::<Vec<usize>>()).prop_shuffle(),
        c in Just((0..9).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let (a, b, c) = (Permutation::new(a).unwrap(), Permutation::new(b).unwrap(), Permutation::new(c).unwrap());
        prop_assert_eq!(a.then(&b).then(&c), a.then(&b.then(&c)));
        prop_assert_eq!(a.inverse().inverse(), a.clone());
        prop_assert_eq!(a.then(&b).inverse(), b.inverse().then(&a.inverse()));
    }
}

#[test]
fn non_bijections_are_rejected() {
    assert!(Permutation::new(vec![0, 0, 1]).is_err());
    assert!(Permutation::new(vec![0, 3, 1]).is_err());
    assert!(GridSpec::new(1, 1).is_err());
}
