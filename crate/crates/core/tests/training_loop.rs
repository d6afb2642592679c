//! Gate training: freeze contract, determinism, resumption, evaluation and
//! the temperature sweep.

mod common;

use common::{random_experts, tiny_base, tiny_config};
use mole_core::compose::CompositionPlan;
use mole_core::gating::Granularity;
use mole_core::lora::ExpertSet;
use mole_core::model::{base_logits, BaseWeights};
use mole_core::tasks::{standard_mixture, Dataset, Example, Split};
use mole_core::training::{
    argmax, evaluate, temperature_sweep, train_gating, GateTrainer, OptimizerKind, TrainConfig,
};
use mole_core::Error;

struct World {
    base: BaseWeights,
    experts: ExpertSet,
    data: Dataset,
}

fn world() -> World {
    let cfg = tiny_config();
    World {
        base: tiny_base(),
        experts: random_experts(&cfg, 3, 0.4, 2),
        data: standard_mixture(&cfg, &[0, 1, 2], 64, 9).unwrap(),
    }
}

fn quick(granularity: Granularity, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        granularity,
        log_every: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_gates_unchanged() {
    let w = world();
    for optimizer in [OptimizerKind::default(), OptimizerKind::Sgd] {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            optimizer,
            ..quick(Granularity::Block, 1)
        };
        let plan = CompositionPlan::mole(&w.base, 3, Granularity::Block, 1).unwrap();
        let out = train_gating(&w.base, &w.experts, plan.clone(), &w.data, &cfg).unwrap();
        assert_eq!(out.plan, plan);
    }
}

#[test]
fn frozen_weights_get_no_gradient_and_stay_identical() {
    let w = world();
    let (base_fp, experts_fp) = (w.base.fingerprint(), w.experts.fingerprint());
    for g in [Granularity::Matrix, Granularity::Layer, Granularity::Block, Granularity::Network] {
        let plan = CompositionPlan::mole(&w.base, 3, g, 1).unwrap();
        let mut trainer = GateTrainer::new(&w.base, &w.experts, plan.clone(), quick(g, 3)).unwrap();
        for _ in 0..3 {
            let report = trainer.step(&w.data).unwrap();
            assert_eq!(report.frozen_grad_norm, 0.0);
            assert!(report.grad_norm > 0.0);
        }
        assert_ne!(trainer.plan(), &plan);
    }
    assert_eq!(w.base.fingerprint(), base_fp);
    assert_eq!(w.experts.fingerprint(), experts_fp);
}

#[test]
fn same_seed_gives_bit_identical_checkpoints() {
    let w = world();
    let run = || {
        let plan = CompositionPlan::mole(&w.base, 3, Granularity::Block, 3).unwrap();
        train_gating(&w.base, &w.experts, plan, &w.data, &quick(Granularity::Block, 12)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.log, b.log);
    for (ua, ub) in a.plan.units.iter().zip(&b.plan.units) {
        let bits = |t: &mole_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ua.e), bits(&ub.e));
    }
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let w = world();
    let cfg = quick(Granularity::Layer, 10);
    let plan = CompositionPlan::mole(&w.base, 3, Granularity::Layer, 5).unwrap();
    let straight = train_gating(&w.base, &w.experts, plan.clone(), &w.data, &cfg).unwrap();

    let mut first = GateTrainer::new(&w.base, &w.experts, plan, cfg.clone()).unwrap();
    for _ in 0..4 {
        first.step(&w.data).unwrap();
    }
    let ckpt = first.checkpoint();
    let resumed = GateTrainer::from_checkpoint(&w.base, &w.experts, ckpt, cfg).unwrap();
    assert_eq!(resumed.steps_done(), 4);
    let rest = resumed.run(&w.data).unwrap();
    assert_eq!(rest.checkpoint, straight.checkpoint);
}

#[test]
fn checkpoint_from_another_config_is_refused() {
    let w = world();
    let plan = CompositionPlan::mole(&w.base, 3, Granularity::Block, 5).unwrap();
    let t = GateTrainer::new(&w.base, &w.experts, plan, quick(Granularity::Block, 4)).unwrap();
    let other = TrainConfig { alpha: 0.1, ..quick(Granularity::Block, 4) };
    let err = GateTrainer::from_checkpoint(&w.base, &w.experts, t.checkpoint(), other).err().unwrap();
    assert_eq!(err.kind(), "contract");
}

#[test]
fn blown_up_gate_reports_divergence_at_step_one() {
    let w = world();
    let mut plan = CompositionPlan::mole(&w.base, 3, Granularity::Block, 5).unwrap();
    for u in &mut plan.units {
        u.e = u.e.map(|_| 1e300);
    }
    let err = train_gating(&w.base, &w.experts, plan, &w.data, &quick(Granularity::Block, 3)).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 1, .. }), "{err}");
}

#[test]
fn empty_dataset_is_an_input_error() {
    let w = world();
    let plan = CompositionPlan::mole(&w.base, 3, Granularity::Block, 5).unwrap();
    let empty = Dataset { examples: vec![], split: Split::Train };
    let err = train_gating(&w.base, &w.experts, plan.clone(), &empty, &quick(Granularity::Block, 3)).unwrap_err();
    assert_eq!(err.kind(), "input");
    assert_eq!(evaluate(&w.base, Some(&w.experts), &plan, &empty).unwrap_err().kind(), "input");
}

#[test]
fn plan_and_config_granularity_must_agree() {
    let w = world();
    let plan = CompositionPlan::mole(&w.base, 3, Granularity::Network, 5).unwrap();
    let err = train_gating(&w.base, &w.experts, plan, &w.data, &quick(Granularity::Block, 3)).unwrap_err();
    assert_eq!(err.kind(), "contract");
    let err = train_gating(&w.base, &w.experts, CompositionPlan::direct_merge(), &w.data, &quick(Granularity::Block, 3)).unwrap_err();
    assert_eq!(err.kind(), "contract");
}

#[test]
fn entropy_log_is_bounded_and_exports_csv() {
    let w = world();
    let plan = CompositionPlan::mole(&w.base, 3, Granularity::Block, 6).unwrap();
    let out = train_gating(&w.base, &w.experts, plan, &w.data, &quick(Granularity::Block, 20)).unwrap();
    let steps: Vec<usize> = out.log.entries.iter().map(|e| e.step).collect();
    assert_eq!(steps, vec![5, 10, 15, 20]);
    for e in &out.log.entries {
        assert!(e.entropy >= 0.0 && e.entropy <= 3f64.ln() + 1e-12);
        assert!((e.mean_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(e.mean_weights.iter().all(|&x| x >= 0.0));
    }
    let csv = out.log.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,entropy,w_0,w_1,w_2"));
    let first: Vec<f64> = lines.next().unwrap().split(',').map(|f| f.parse().unwrap()).collect();
    assert_eq!(first[0], 5.0);
    assert_eq!(first[1], out.log.entries[0].entropy);
    assert_eq!(lines.count(), 3);
}

#[test]
fn memorized_example_scores_full_accuracy() {
    let w = world();
    let input = vec![3, 17, 22, 40, 5, 9];
    let logits = base_logits(&w.base, &input).unwrap();
    // Teacher-forced targets are exactly the model's own predictions.
    let target: Vec<usize> = (0..input.len()).map(|p| argmax(&logits.data()[p * 64..(p + 1) * 64])).collect();
    assert!(target.iter().any(|&t| t != 0));
    let data = Dataset {
        examples: vec![Example { input, target, task_id: 0 }],
        split: Split::Eval,
    };
    let m = evaluate(&w.base, None, &CompositionPlan::base_only(), &data).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(m.per_task_accuracy[&0], 1.0);
}

#[test]
fn evaluation_is_repeatable_and_plans_do_not_leak() {
    let w = world();
    let plan = CompositionPlan::mole(&w.base, 3, Granularity::Block, 6).unwrap();
    let a = evaluate(&w.base, Some(&w.experts), &plan, &w.data).unwrap();
    let base = evaluate(&w.base, None, &CompositionPlan::base_only(), &w.data).unwrap();
    let b = evaluate(&w.base, Some(&w.experts), &plan, &w.data).unwrap();
    assert_eq!(a, b);
    assert!(base.per_expert_gate.is_none() && base.mean_gate_entropy.is_none());
    assert!(a.per_expert_gate.is_some());
    assert_eq!(base, evaluate(&w.base, None, &CompositionPlan::base_only(), &w.data).unwrap());
}

#[test]
fn single_temperature_sweep_is_a_plain_fixed_tau_run() {
    let w = world();
    let cfg = quick(Granularity::Block, 10);
    let rows = temperature_sweep(&w.base, &w.experts, &w.data, &[0.7], &cfg).unwrap();
    assert_eq!(rows.len(), 1);
    let plan = CompositionPlan::mole(&w.base, 3, Granularity::Block, cfg.seed).unwrap().with_fixed_temperature(0.7).unwrap();
    let plain = train_gating(&w.base, &w.experts, plan, &w.data, &TrainConfig { alpha: 0.0, ..cfg }).unwrap();
    assert_eq!(rows[0].log, plain.log);
    assert_eq!(rows[0].metrics, evaluate(&w.base, Some(&w.experts), &plain.plan, &w.data).unwrap());
}

#[test]
fn sweep_has_one_row_per_temperature_and_rejects_bad_ones() {
    let w = world();
    let cfg = quick(Granularity::Network, 2);
    let taus = [0.3, 1.0, 3.0, 9.0];
    let rows = temperature_sweep(&w.base, &w.experts, &w.data, &taus, &cfg).unwrap();
    assert_eq!(rows.iter().map(|r| r.tau).collect::<Vec<_>>(), taus);
    let err = temperature_sweep(&w.base, &w.experts, &w.data, &[1.0, 0.0], &cfg).err().unwrap();
    assert_eq!(err.kind(), "contract");
}

#[test]
fn final_entropy_is_nondecreasing_in_temperature() {
    let cfg = tiny_config();
    let base = tiny_base();
    let taus = [0.25, 1.0, 4.0];
    for seed in 0..3 {
        let experts = random_experts(&cfg, 3, 0.4, 10 + seed);
        let data = standard_mixture(&cfg, &[0, 1, 2], 64, 20 + seed).unwrap();
        let train = TrainConfig { seed, ..quick(Granularity::Block, 60) };
        let rows = temperature_sweep(&base, &experts, &data, &taus, &train).unwrap();
        let h: Vec<f64> = rows.iter().map(|r| r.final_entropy).collect();
        assert!(h.windows(2).all(|p| p[0] <= p[1]), "seed {seed}: entropies {h:?} for taus {taus:?}");
    }
}
