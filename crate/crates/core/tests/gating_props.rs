//! Gate arithmetic: value path, tape path and their oracles.

mod common;

use common::{random_experts, rng, tiny_base, tiny_config};
use mole_core::autograd::{Tape, Var};
use mole_core::compose::mole_block_forward;
use mole_core::gating::{
    apply_mask_renormalize, distribution_of, gate_logits, gate_on_tape, gate_softmax, gating_entropy, mix_outputs,
    moe_topk_reference, normalize_concat, AttachPoint, ExpertMask, GateDistribution, GateVars, GatingUnit, MixRule,
};
use mole_core::lora::{ExpertSet, LoraAdapter, LoraMatrix};
use mole_core::model::base_block_forward;
use mole_core::Tensor;
use proptest::prelude::*;

fn simplex(raw: &[f64]) -> GateDistribution {
    let total: f64 = raw.iter().sum();
    GateDistribution::new(raw.iter().map(|v| v / total).collect()).unwrap()
}

fn arb_logits() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-20.0f64..20.0, 1..8)
}

fn arb_simplex() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.01f64..1.0, 2..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_lands_on_the_simplex(eps in arb_logits(), tau in 0.05f64..20.0) {
        let g = gate_softmax(&Tensor::vector(&eps).unwrap(), tau).unwrap();
        prop_assert!(g.weights().iter().all(|&w| (0.0..=1.0).contains(&w)));
        prop_assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_ignores_a_common_shift(eps in arb_logits(), shift in -50.0f64..50.0, tau in 0.1f64..5.0) {
        let a = gate_softmax(&Tensor::vector(&eps).unwrap(), tau).unwrap();
        let shifted: Vec<f64> = eps.iter().map(|e| e + shift).collect();
        let b = gate_softmax(&Tensor::vector(&shifted).unwrap(), tau).unwrap();
        prop_assert!(common::max_abs(a.weights(), b.weights()) < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_exponentials(eps in proptest::collection::vec(-5.0f64..5.0, 1..8), tau in 0.2f64..5.0) {
        let g = gate_softmax(&Tensor::vector(&eps).unwrap(), tau).unwrap();
        let ex: Vec<f64> = eps.iter().map(|e| (e / tau).exp()).collect();
        let z: f64 = ex.iter().sum();
        for (w, e) in g.weights().iter().zip(&ex) {
            prop_assert!((w - e / z).abs() < 1e-13);
        }
    }

    #[test]
    fn masking_preserves_ratios_of_kept_experts(raw in arb_simplex(), bits in any::<u32>()) {
        let g = simplex(&raw);
        let n = g.len();
        let mut keep: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
        keep[bits as usize % n] = true;
        let m = apply_mask_renormalize(&g, &ExpertMask::new(keep.clone()).unwrap()).unwrap();
        prop_assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let kept: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
        for (w, k) in m.weights().iter().zip(&keep) {
            if !k {
                prop_assert_eq!(*w, 0.0);
            }
        }
        for &i in &kept {
            for &j in &kept {
                let before = g.weights()[i] / g.weights()[j];
                let after = m.weights()[i] / m.weights()[j];
                prop_assert!((before - after).abs() <= 1e-12 * before.max(1.0));
            }
        }
    }

    #[test]
    fn keeping_everything_changes_nothing(raw in arb_simplex()) {
        let g = simplex(&raw);
        let m = apply_mask_renormalize(&g, &ExpertMask::all(g.len())).unwrap();
        prop_assert_eq!(g.weights(), m.weights());
    }

    #[test]
    fn masking_a_uniform_gate_stays_uniform(n in 2usize..9, bits in any::<u32>()) {
        let mut keep: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
        keep[0] = true;
        let kept = keep.iter().filter(|&&k| k).count();
        let m = apply_mask_renormalize(&GateDistribution::uniform(n), &ExpertMask::new(keep.clone()).unwrap()).unwrap();
        for (w, k) in m.weights().iter().zip(&keep) {
            let want = if *k { 1.0 / kept as f64 } else { 0.0 };
            prop_assert!((w - want).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_lies_between_zero_and_ln_n(raw in arb_simplex()) {
        let g = simplex(&raw);
        let h = g.entropy();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (g.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn mean_entropy_matches_hand_sum(dists in proptest::collection::vec(arb_simplex(), 1..6)) {
        let gs: Vec<GateDistribution> = dists.iter().map(|d| simplex(d)).collect();
        let mut total = 0.0;
        for g in &gs {
            for &w in g.weights() {
                if w > 0.0 {
                    total -= w * w.ln();
                }
            }
        }
        let want = total / gs.len() as f64;
        prop_assert!((gating_entropy(&gs).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn topk_matches_sort_oracle(seed in any::<u64>(), n in 2usize..9, d in 1usize..6, k_raw in 1usize..9) {
        let k = 1 + (k_raw - 1) % n;
        let mut r = rng(seed);
        let h = Tensor::randn(&[d], 1.0, &mut r);
        let emb = Tensor::randn(&[n, d], 1.0, &mut r);
        let (g, active) = moe_topk_reference(&h, &emb, k).unwrap();
        // Oracle: scores by brute force, stable sort descending by score.
        let scores: Vec<f64> = (0..n).map(|i| (0..d).map(|j| h.data()[j] * emb.at(i, j)).sum()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        prop_assert_eq!(&active[..], &order[..k]);
        prop_assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mix_matches_elementwise_oracle(seed in any::<u64>(), raw in arb_simplex()) {
        let g = simplex(&raw);
        let mut r = rng(seed);
        let outs: Vec<Tensor> = (0..g.len()).map(|_| Tensor::randn(&[3, 4], 1.0, &mut r)).collect();
        let mixed = mix_outputs(&g, &outs).unwrap();
        for idx in 0..12 {
            let want: f64 = g.weights().iter().zip(&outs).map(|(w, o)| w * o.data()[idx]).sum();
            prop_assert!((mixed.data()[idx] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_segments_have_unit_rms(seed in any::<u64>(), n in 1usize..5, scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let outs: Vec<Tensor> = (0..n).map(|_| Tensor::randn(&[4, 3], scale, &mut r)).collect();
        let cat = normalize_concat(&outs).unwrap();
        prop_assert_eq!(cat.len(), n * 12);
        for seg in cat.data().chunks(12) {
            let rms = (seg.iter().map(|v| v * v).sum::<f64>() / 12.0).sqrt();
            prop_assert!((rms - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn tape_gate_equals_value_path(seed in any::<u64>(), n in 1usize..5, mask_bits in any::<u8>()) {
        let cfg = tiny_config();
        let mut r = rng(seed);
        let unit = GatingUnit::init(AttachPoint::Block(0), &cfg, n, &mut r).unwrap();
        let outs: Vec<Tensor> = (0..n).map(|_| Tensor::randn(&[cfg.max_seq_len, cfg.d_model], 1.0, &mut r)).collect();
        let mut keep: Vec<bool> = (0..n).map(|i| mask_bits >> i & 1 == 1).collect();
        keep[0] = true;
        let mask = ExpertMask::new(keep).unwrap();

        let eps = gate_logits(&normalize_concat(&outs).unwrap(), &unit.e).unwrap();
        let value = apply_mask_renormalize(&gate_softmax(&eps, unit.tau()).unwrap(), &mask).unwrap();

        let mut tape = Tape::new();
        let gv = GateVars::register(&mut tape, &unit, false).unwrap();
        let ov: Vec<Var> = outs.iter().map(|o| tape.constant(o.clone()).unwrap()).collect();
        let g = gate_on_tape(&mut tape, &gv, &ov, Some(&mask)).unwrap();
        prop_assert!(common::max_abs(distribution_of(&tape, g).weights(), value.weights()) < 1e-12);
    }
}

#[test]
fn high_temperature_flattens_towards_uniform() {
    let eps = Tensor::vector(&[0.0, 2f64.ln(), 4f64.ln()]).unwrap();
    let g = gate_softmax(&eps, 100.0).unwrap();
    assert!(g.weights().iter().all(|w| (w - 1.0 / 3.0).abs() < 0.01));
}

#[test]
fn zero_adapters_give_finite_block_output_of_the_right_shape() {
    let cfg = tiny_config();
    let base = tiny_base();
    let zero = |i: usize| {
        let mut a = LoraAdapter::init(&cfg, 2, 1.0, format!("z{i}"), None, &mut rng(i as u64)).unwrap();
        for m in a.matrices.values_mut() {
            let (o, i) = m.shape();
            *m = LoraMatrix::zeros(o, i, m.rank(), m.scaling).unwrap();
        }
        a
    };
    let experts = ExpertSet::new((0..3).map(zero).collect(), &cfg).unwrap();
    let unit = GatingUnit::init(AttachPoint::Block(1), &cfg, 3, &mut rng(1)).unwrap();
    let x = Tensor::randn(&[cfg.max_seq_len, cfg.d_model], 1.0, &mut rng(2));
    let (o, g) = mole_block_forward(&x, &base, 1, &experts, &unit, None, MixRule::Literal).unwrap();
    assert_eq!(o.shape(), x.shape());
    assert!(o.is_finite());
    // With identical experts every segment is the same, but the gate is
    // still driven by e, so only the simplex property is guaranteed.
    assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn literal_block_output_is_frozen_plus_gated_experts() {
    let cfg = tiny_config();
    let base = tiny_base();
    let experts = random_experts(&cfg, 3, 0.4, 2);
    let unit = GatingUnit::init(AttachPoint::Block(0), &cfg, 3, &mut rng(9)).unwrap();
    let x = Tensor::randn(&[cfg.max_seq_len, cfg.d_model], 1.0, &mut rng(10));
    let (o, g) = mole_block_forward(&x, &base, 0, &experts, &unit, None, MixRule::Literal).unwrap();

    let run = |w: &mole_core::model::BlockWeights| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let bv = mole_core::lora::register_block(&mut tape, w).unwrap();
        let out = base_block_forward(&mut tape, xv, &bv, cfg.n_heads).unwrap();
        tape.value(out).clone()
    };
    let frozen = run(&base.blocks[0]);
    let outs: Vec<Tensor> = experts
        .adapters()
        .iter()
        .map(|a| run(&mole_core::lora::effective_block(&base.blocks[0], a, 0).unwrap()))
        .collect();
    let want = frozen.add(&mix_outputs(&g, &outs).unwrap()).unwrap();
    assert!(o.max_abs_diff(&want) < 1e-10);
}

#[test]
fn masking_to_one_expert_matches_a_single_expert_run() {
    let cfg = tiny_config();
    let base = tiny_base();
    let experts = random_experts(&cfg, 3, 0.4, 4);
    let unit3 = GatingUnit::init(AttachPoint::Block(1), &cfg, 3, &mut rng(5)).unwrap();
    let unit1 = GatingUnit::init(AttachPoint::Block(1), &cfg, 1, &mut rng(6)).unwrap();
    let x = Tensor::randn(&[cfg.max_seq_len, cfg.d_model], 1.0, &mut rng(7));
    for j in 0..3 {
        let mask = ExpertMask::only(3, j);
        let (masked, g) = mole_block_forward(&x, &base, 1, &experts, &unit3, Some(&mask), MixRule::Literal).unwrap();
        let (single, _) = mole_block_forward(&x, &base, 1, &experts.single(j), &unit1, None, MixRule::Literal).unwrap();
        assert_eq!(g.weights()[j], 1.0);
        assert!(masked.max_abs_diff(&single) < 1e-10);
    }
}
