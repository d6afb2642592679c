//! Container and artifact files survive a trip through disk.

mod common;

use common::{random_experts, rng, tiny_base, tiny_config};
use mole_core::compose::{model_forward, CompositionPlan};
use mole_core::gating::{Granularity, MixRule};
use mole_core::io::{load_model, Artifact, Container, GatedModel};
use mole_core::training::{train_gating, TrainConfig};
use mole_core::Tensor;
use proptest::prelude::*;
use serde_json::json;

fn arb_tensor() -> impl Strategy<Value = Tensor> {
    (proptest::collection::vec(1usize..5, 1..4), any::<u64>()).prop_map(|(shape, seed)| {
        Tensor::randn(&shape, 10.0, &mut rng(seed))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn containers_round_trip_byte_for_byte(tensors in proptest::collection::vec(arb_tensor(), 0..6), tag in "[a-z]{0,12}", seed in any::<u32>()) {
        let mut c = Container::new(json!({"tag": tag, "seed": seed}));
        for (i, t) in tensors.iter().enumerate() {
            c.push(format!("t{i}"), t).unwrap();
        }
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        for (i, t) in tensors.iter().enumerate() {
            let got = back.get(&format!("t{i}")).unwrap();
            prop_assert_eq!(got.shape(), t.shape());
            // Stored as f32: relative rounding error at most 2^-24.
            for (a, b) in got.data().iter().zip(t.data()) {
                prop_assert!((a - b).abs() <= b.abs() * 6e-8);
            }
        }
    }

    #[test]
    fn truncated_or_extended_files_are_rejected(tensors in proptest::collection::vec(arb_tensor(), 1..4), cut in 1usize..64) {
        let mut c = Container::default();
        for (i, t) in tensors.iter().enumerate() {
            c.push(format!("t{i}"), t).unwrap();
        }
        let bytes = c.to_bytes().unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(Container::from_bytes(&bytes[..bytes.len() - cut]).is_err());
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0, 0, 0, 0]);
        prop_assert!(Container::from_bytes(&longer).is_err());
    }
}

#[test]
fn trained_gated_model_reloads_with_the_same_outputs() {
    let cfg = tiny_config();
    let base = tiny_base();
    let experts = random_experts(&cfg, 3, 0.4, 3);
    let data = mole_core::tasks::standard_mixture(&cfg, &[0, 1, 2], 32, 1).unwrap();
    let plan = CompositionPlan::mole(&base, 3, Granularity::Layer, 2).unwrap().with_mix(MixRule::DeltaMix);
    let train = TrainConfig { steps: 5, granularity: Granularity::Layer, ..TrainConfig::default() };
    let trained = train_gating(&base, &experts, plan, &data, &train).unwrap().plan;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gated.mole");
    let model = GatedModel { base: base.clone(), experts: experts.clone(), plan: trained.clone() };
    Artifact::Gated(model).save(&path, 2, "test").unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded.plan.granularity, Granularity::Layer);
    assert_eq!(loaded.plan.mix, MixRule::DeltaMix);
    assert_eq!(loaded.plan.units.len(), trained.units.len());

    let tokens = [3, 20, 37, 50, 7];
    let (want, want_gates) = model_forward(&tokens, &base, Some(&experts), &trained).unwrap();
    let (got, got_gates) = model_forward(&tokens, &loaded.base, loaded.experts.as_ref(), &loaded.plan).unwrap();
    // Parameters round to f32 on disk, so outputs agree to single precision.
    assert!(got.max_abs_diff(&want) < 1e-4, "{}", got.max_abs_diff(&want));
    for (a, b) in got_gates.iter().zip(&want_gates) {
        assert!(common::max_abs(a.weights(), b.weights()) < 1e-4);
    }
}

#[test]
fn saving_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.mole"), dir.path().join("b.mole"));
    Artifact::Base(tiny_base()).save(&a, 5, "test").unwrap();
    Artifact::Base(tiny_base()).save(&b, 5, "test").unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
