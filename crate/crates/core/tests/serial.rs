// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::*;
use intervene::engine::{IntervenableConfig, IntervenableModel, InterventionSpec, Request, UnitLocations};
use intervene::interventions::InterventionKind;
use intervene::model::{Model, ModelSchema};
use intervene::Error;
use proptest::prelude::*;

fn small() -> Model {
    Model::build(ModelSchema::transformer(3, 16, 2, 24, 8), 5).unwrap()
}

#[test]
fn toy_transformer_chains_match_two_parallel_runs() {
    let model = Model::build(ModelSchema::toy_transformer(), 11).unwrap();
    let mut r = rng(40);
    for i in 0..6 {
        let c = random_chain(model.schema(), &mut r);
        let serial = serial_logits(&model, &c).unwrap();
        let manual = chained_parallel_logits(&model, &c).unwrap();
        assert!(bits_eq(&serial, &manual), "chain {i}: {} -> {}", c.sites[0], c.sites[1]);
    }
}

#[test]
fn downstream_first_chain_is_an_order_violation() {
    let specs = vec![
        InterventionSpec::new(2, "block_output", InterventionKind::Vanilla),
        InterventionSpec::new(1, "block_output", InterventionKind::Vanilla),
    ];
    let err = IntervenableModel::wrap(small(), IntervenableConfig::serial(specs)).unwrap_err();
    assert!(matches!(err, Error::SerialOrderViolation { index: 1, prev: 0 }), "{err}");
}

#[test]
fn serial_needs_one_source_per_link() {
    let specs = vec![
        InterventionSpec::new(0, "block_output", InterventionKind::Vanilla),
        InterventionSpec::new(1, "block_output", InterventionKind::Vanilla),
    ];
    let pv = IntervenableModel::wrap(small(), IntervenableConfig::serial(specs)).unwrap();
    let mut r = rng(41);
    let base = random_tokens(&mut r, 1, 4, 24);
    let req = Request::new(base.clone(), vec![base.clone()], UnitLocations::at(1, 2, 1));
    assert!(pv.run(&req).is_err());
    let req = Request::new(base.clone(), vec![base.clone(), base], UnitLocations::at(1, 2, 1));
    assert!(pv.run(&req).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_chains_match(seed in any::<u64>()) {
        let model = small();
        let c = random_chain(model.schema(), &mut rng(seed));
        prop_assert!(bits_eq(&serial_logits(&model, &c).unwrap(), &chained_parallel_logits(&model, &c).unwrap()));
    }
}
