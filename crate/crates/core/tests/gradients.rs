// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeSet;

use common::*;
use proptest::prelude::*;

#[test]
fn primitives_match_finite_differences() {
    for name in PRIMITIVE_CASES {
        for seed in 0..5 {
            let err = check(&primitive_case(name, seed)).unwrap();
            assert!(err < FD_TOLERANCE, "{name} seed {seed}: {err:.3e}");
        }
    }
}

#[test]
fn trainable_interventions_match_finite_differences() {
    for name in TRAINABLE_CASES {
        for seed in 0..5 {
            let err = check(&trainable_case(name, seed)).unwrap();
            assert!(err < FD_TOLERANCE, "{name} seed {seed}: {err:.3e}");
        }
    }
}

#[test]
fn cases_exercise_every_primitive() {
    let mut seen = BTreeSet::new();
    for name in PRIMITIVE_CASES {
        seen.extend(ops_of(&primitive_case(name, 0)).unwrap());
    }
    let missing: Vec<_> = PRIMITIVE_OPS.iter().filter(|op| !seen.contains(*op)).collect();
    assert!(missing.is_empty(), "{missing:?}");
}

#[test]
fn trainable_cases_record_their_parameter_ops() {
    let ops = ops_of(&trainable_case("rotated.weight", 0)).unwrap();
    assert!(ops.contains(&"inverse"), "{ops:?}");
    let ops = ops_of(&trainable_case("boundless_rotated.boundary", 0)).unwrap();
    assert!(ops.contains(&"sigmoid"), "{ops:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_primitive_seeds(i in 0..PRIMITIVE_CASES.len(), seed in 100u64..100_000) {
        let err = check(&primitive_case(PRIMITIVE_CASES[i], seed)).unwrap();
        prop_assert!(err < FD_TOLERANCE, "{} seed {}: {:.3e}", PRIMITIVE_CASES[i], seed, err);
    }

    #[test]
    fn random_trainable_seeds(i in 0..TRAINABLE_CASES.len(), seed in 100u64..100_000) {
        let err = check(&trainable_case(TRAINABLE_CASES[i], seed)).unwrap();
        prop_assert!(err < FD_TOLERANCE, "{} seed {}: {:.3e}", TRAINABLE_CASES[i], seed, err);
    }
}
