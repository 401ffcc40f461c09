// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::*;
use intervene::model::{Model, ModelSchema};
use proptest::prelude::*;

fn assert_matches_oracle(model: &Model, c: &SpliceCase) {
    let got = engine_splice(model, c).unwrap();
    let want = manual_splice(model, c).unwrap();
    assert!(bits_eq(&got.logits, &want.logits), "{:?} at {}: logits", c.kind, c.site.key);
    assert!(bits_eq(&got.site_value, &want.site_value), "{:?} at {}: site", c.kind, c.site.key);
    match (&got.collected, &want.collected) {
        (Some(a), Some(b)) => assert!(bits_eq(a, b), "collected buffer"),
        (None, None) => {}
        _ => panic!("collect presence differs"),
    }
}

#[test]
fn toy_transformer_splices_are_bit_exact() {
    let model = Model::build(ModelSchema::toy_transformer(), 11).unwrap();
    let mut r = rng(21);
    for _ in 0..12 {
        assert_matches_oracle(&model, &random_splice_case(model.schema(), &mut r));
    }
}

#[test]
fn mlp_splices_are_bit_exact() {
    let model = Model::build(ModelSchema::mlp(3, 12, 30), 2).unwrap();
    let mut r = rng(22);
    for _ in 0..12 {
        assert_matches_oracle(&model, &random_splice_case(model.schema(), &mut r));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn small_transformer_splices(seed in any::<u64>()) {
        let model = Model::build(ModelSchema::transformer(2, 16, 2, 24, 8), seed % 7).unwrap();
        let c = random_splice_case(model.schema(), &mut rng(seed));
        assert_matches_oracle(&model, &c);
    }
}
