// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::*;
use intervene::engine::{IntervenableConfig, IntervenableModel, InterventionSpec, Request, UnitLocations};
use intervene::interventions::{self as iv, InterventionKind, RotationParams, Subspace};
use intervene::model::{Model, ModelSchema, SiteKey};
use intervene::tensor::{DType, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn pair(seed: u64, n: usize, d: usize) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    (
        Tensor::randn(&[n, d], 1.0, DType::F32, &mut r),
        Tensor::randn(&[n, d], 1.0, DType::F32, &mut r),
    )
}

fn some_dims(seed: u64, d: usize) -> Subspace {
    let mut r = rng(seed ^ 0xd1);
    Subspace::dims((0..d).filter(|_| r.random_bool(0.5)).collect::<Vec<_>>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn full_rotation_swaps_in_the_source(seed in any::<u64>(), d in 2usize..24, n in 1usize..4) {
        let (base, source) = pair(seed, n, d);
        let rot = RotationParams::full(d, seed).unwrap();
        let out = rot.apply(&base, &source, &Subspace::all()).unwrap();
        prop_assert!(out.max_abs_diff(&source) <= 1e-5);
    }

    #[test]
    fn full_rank_low_rank_map_swaps_in_the_source(seed in any::<u64>(), d in 2usize..24) {
        let (base, source) = pair(seed, 2, d);
        let rot = RotationParams::low_rank(d, d, seed).unwrap();
        let out = rot.apply(&base, &source, &Subspace::all()).unwrap();
        prop_assert!(out.max_abs_diff(&source) <= 1e-5);
    }

    #[test]
    fn rotations_stay_orthonormal(seed in any::<u64>(), d in 2usize..32, k in 1usize..8) {
        prop_assert!(RotationParams::full(d, seed).unwrap().orthogonality_error().unwrap() <= 1e-10);
        let k = k.min(d);
        prop_assert!(RotationParams::low_rank(d, k, seed).unwrap().orthogonality_error().unwrap() <= 1e-10);
    }

    #[test]
    fn empty_subspace_is_identity(seed in any::<u64>(), d in 1usize..16) {
        let (base, source) = pair(seed, 3, d);
        let none = Subspace::none();
        let outs = [
            iv::vanilla(&base, &source, &none).unwrap(),
            iv::addition(&base, &source, &none).unwrap(),
            iv::zero(&base, &none).unwrap(),
            RotationParams::full(d, seed).unwrap().apply(&base, &source, &none).unwrap(),
            RotationParams::low_rank(d, 1, seed).unwrap().apply(&base, &source, &none).unwrap(),
            RotationParams::boundless(d, seed, 0.5).unwrap().apply(&base, &source, &none).unwrap(),
        ];
        for out in &outs {
            prop_assert!(bits_eq(out, &base));
        }
    }

    #[test]
    fn identity_rotation_is_vanilla(seed in any::<u64>(), d in 1usize..16) {
        let (base, source) = pair(seed, 2, d);
        let sub = some_dims(seed, d);
        let rot = RotationParams::identity(d).apply(&base, &source, &sub).unwrap();
        prop_assert!(bits_eq(&rot, &iv::vanilla(&base, &source, &sub).unwrap()));
    }

    #[test]
    fn collect_reads_without_writing(seed in any::<u64>(), d in 1usize..16) {
        let (base, _) = pair(seed, 3, d);
        let sub = some_dims(seed, d);
        let (out, taken) = iv::collect(&base, &sub).unwrap();
        prop_assert!(bits_eq(&out, &base));
        let idx = sub.indices(d).unwrap();
        prop_assert_eq!(taken.shape(), &[3, idx.len()][..]);
    }

    #[test]
    fn saturated_boundless_mask_interpolates_between_base_and_rotation(seed in any::<u64>(), d in 2usize..12) {
        let (base, source) = pair(seed, 2, d);
        let mut rot = RotationParams::boundless(d, seed, 0.5).unwrap();
        let boundary = |v: f64| Tensor::from_f64(&[d], &vec![v; d], DType::F64).unwrap();
        rot.set_tensor("boundary", &boundary(40.0)).unwrap();
        prop_assert!(rot.apply(&base, &source, &Subspace::all()).unwrap().max_abs_diff(&source) <= 1e-5);
        rot.set_tensor("boundary", &boundary(-40.0)).unwrap();
        prop_assert!(rot.apply(&base, &source, &Subspace::all()).unwrap().max_abs_diff(&base) <= 1e-5);
    }
}

#[test]
fn setters_leave_upstream_sites_and_collect_leaves_everything() {
    let model = Model::build(ModelSchema::transformer(3, 16, 2, 24, 8), 4).unwrap();
    let all: Vec<SiteKey> = model.schema().sites().iter().map(|s| s.key).collect();
    let mut r = rng(8);
    for case in 0..6 {
        let base = random_tokens(&mut r, 2, 5, 24);
        let source = random_tokens(&mut r, 2, 5, 24);
        let site = all[r.random_range(0..all.len())];
        let clean = model.forward(&base, &all).unwrap();
        let kinds = [
            InterventionKind::Vanilla,
            InterventionKind::Zero,
            InterventionKind::Addition,
            InterventionKind::Noise,
            InterventionKind::Rotated,
            InterventionKind::Collect,
        ];
        for kind in kinds {
            let spec = InterventionSpec::new(site.layer, site.component.name(), kind.clone());
            let pv = IntervenableModel::wrap(model.clone(), IntervenableConfig::parallel(vec![spec])).unwrap();
            let req = Request::new(base.clone(), vec![source.clone()], UnitLocations::at(r.random_range(0..5), 1, 2))
                .record(&all);
            let out = pv.run(&req).unwrap();
            for s in &all {
                let touched = kind != InterventionKind::Collect && s >= &site;
                if !touched {
                    assert!(
                        bits_eq(&out.intervened.sites[s], &clean.sites[s]),
                        "case {case}: {} at {site} changed {s}",
                        kind.name()
                    );
                }
            }
            if kind == InterventionKind::Collect {
                assert!(bits_eq(&out.intervened.logits, &clean.logits));
            }
        }
    }
}
