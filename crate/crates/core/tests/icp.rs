use std::collections::BTreeSet;

use misa::blockmdp::{make_toy_family, FixedAction, ToyConfig, TOY_TRAIN_ENVS};
use misa::icp::{icp, misa_linear, regression_data, Target};
use proptest::prelude::*;

fn toy_buffer(seed: u64, steps: usize) -> misa::blockmdp::ReplayBuffer {
    let fam = make_toy_family(&ToyConfig::default()).unwrap();
    fam.collect(&TOY_TRAIN_ENVS, &FixedAction(0), steps, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn misa_is_deterministic(seed in any::<u64>()) {
        let a = misa_linear(&toy_buffer(seed, 200), 0.05).unwrap();
        let b = misa_linear(&toy_buffer(seed, 200), 0.05).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn intersection_ignores_environment_order(seed in any::<u64>()) {
        let data = regression_data(&toy_buffer(seed, 200), Target::Reward);
        let forward = icp(&data, 0.05).unwrap();
        let mut reversed = data.clone();
        reversed.reverse();
        let backward = icp(&reversed, 0.05).unwrap();
        prop_assert_eq!(&forward.intersection, &backward.intersection);

        // the reported intersection is the set intersection of the accepted sets
        let mut sets = forward.accepted_sets.iter();
        let expected = match sets.next() {
            Some(first) => sets.fold(first.clone(), |acc, s| acc.intersection(s).cloned().collect()),
            None => BTreeSet::new(),
        };
        prop_assert_eq!(forward.intersection, expected);
    }
}

#[test]
fn every_subset_gets_a_verdict() {
    let data = regression_data(&toy_buffer(3, 300), Target::Reward);
    let res = icp(&data, 0.05).unwrap();
    assert_eq!(res.verdicts.len(), 1 << 3);
    let distinct: BTreeSet<_> = res.verdicts.iter().map(|v| v.candidate_set.clone()).collect();
    assert_eq!(distinct.len(), 8);
    for v in &res.verdicts {
        assert!((0.0..=1.0).contains(&v.p_value));
        assert_eq!(v.accepted, v.p_value > 0.05);
    }
}

#[test]
fn alpha_is_split_over_the_variables() {
    let res = misa_linear(&toy_buffer(5, 300), 0.05).unwrap();
    assert!((res.alpha_per_call - 0.05 / 3.0).abs() < 1e-15);
    assert!(res.calls.iter().all(|(_, r)| r.alpha == res.alpha_per_call));
}
