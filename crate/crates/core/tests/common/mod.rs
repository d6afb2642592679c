#![allow(dead_code)]

use mole_core::lora::{ExpertSet, LoraAdapter, LoraMatrix};
use mole_core::model::{BaseWeights, ModelConfig};
use mole_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small model: 2 blocks of width 8, vocab 64 so the standard tasks fit.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_blocks: 2,
        max_seq_len: 8,
        vocab_size: 64,
        seed: 5,
    }
}

pub fn tiny_base() -> BaseWeights {
    BaseWeights::init(tiny_config()).unwrap()
}

/// Adapter with non-zero `B`, so it actually changes the model.
pub fn random_adapter(cfg: &ModelConfig, rank: usize, b_std: f64, seed: u64) -> LoraAdapter {
    let mut r = rng(seed);
    let mut a = LoraAdapter::init(cfg, rank, 1.0, format!("x{seed}"), Some(seed as usize), &mut r).unwrap();
    for m in a.matrices.values_mut() {
        let (o, _) = m.shape();
        *m = LoraMatrix::new(m.a.clone(), Tensor::randn(&[o, rank], b_std, &mut r), m.scaling).unwrap();
    }
    a
}

pub fn random_experts(cfg: &ModelConfig, n: usize, b_std: f64, seed: u64) -> ExpertSet {
    let adapters = (0..n).map(|i| random_adapter(cfg, 2, b_std, seed * 100 + i as u64)).collect();
    ExpertSet::new(adapters, cfg).unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central finite differences of a scalar function of one flat vector.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
