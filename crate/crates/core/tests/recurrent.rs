// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::*;
use intervene::engine::{IntervenableConfig, IntervenableModel, InterventionSpec, Request, UnitLocations};
use intervene::interventions::InterventionKind;
use intervene::model::{Component, SiteKey};
use proptest::prelude::*;
use serde_json::json;

const CELL: SiteKey = SiteKey {
    component: Component::CellOutput,
    layer: 0,
};

#[test]
fn link_six_to_three_writes_source_step_six_into_base_step_three() {
    let model = gru_model(1);
    let mut r = rng(63);
    let base = random_tokens(&mut r, 2, 9, 20);
    let source = random_tokens(&mut r, 2, 9, 20);
    let locs = UnitLocations::resolve(&json!({"sources->base": [6, 3]}), 1, 2).unwrap();
    let spec = InterventionSpec::new(0, "cell_output", InterventionKind::Vanilla);
    let pv = IntervenableModel::wrap(model.clone(), IntervenableConfig::parallel(vec![spec])).unwrap();
    let req = Request::new(base.clone(), vec![source.clone()], locs).record(&[CELL]);
    let cells = pv.run(&req).unwrap().intervened.sites[&CELL].clone();
    let clean = model.forward(&base, &[CELL]).unwrap().sites[&CELL].clone();
    let src = model.forward(&source, &[CELL]).unwrap().sites[&CELL].clone();
    for step in 0..3 {
        assert!(f32_bits_eq(&step_rows(&cells, step), &step_rows(&clean, step)), "step {step}");
    }
    assert!(f32_bits_eq(&step_rows(&cells, 3), &step_rows(&src, 6)));
    assert!(!f32_bits_eq(&step_rows(&cells, 4), &step_rows(&clean, 4)));
}

#[test]
fn time_step_past_the_sequence_is_rejected() {
    let model = gru_model(2);
    let mut r = rng(64);
    let base = random_tokens(&mut r, 1, 4, 20);
    let source = random_tokens(&mut r, 1, 4, 20);
    assert!(gru_intervened_cells(&model, InterventionKind::Vanilla, &base, &source, 1, 7).is_err());
    assert!(gru_intervened_cells(&model, InterventionKind::Vanilla, &base, &source, 9, 1).is_err());
}

#[test]
fn transformer_unit_on_recurrent_model_is_rejected() {
    let spec = InterventionSpec::new(0, "cell_output", InterventionKind::Vanilla).with_unit(intervene::model::Unit::Pos);
    assert!(IntervenableModel::wrap(gru_model(3), IntervenableConfig::parallel(vec![spec])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn steps_before_the_intervention_are_untouched(seed in any::<u64>(), kind in 0usize..4) {
        let kinds = [InterventionKind::Vanilla, InterventionKind::Zero, InterventionKind::Addition, InterventionKind::Noise];
        let model = gru_model(seed % 5);
        let mut r = rng(seed);
        use rand::Rng;
        let len = r.random_range(2..=10);
        let base = random_tokens(&mut r, 2, len, 20);
        let source = random_tokens(&mut r, 2, len, 20);
        let (t, st) = (r.random_range(0..len), r.random_range(0..len));
        let cells = gru_intervened_cells(&model, kinds[kind].clone(), &base, &source, st, t).unwrap();
        let clean = model.forward(&base, &[CELL]).unwrap().sites[&CELL].clone();
        for step in 0..t {
            prop_assert!(f32_bits_eq(&step_rows(&cells, step), &step_rows(&clean, step)));
        }
    }
}
