//! Balance loss over gate statistics, token-level domain loss, and their
//! weighted total.

use serde::{Deserialize, Serialize};

use crate::autograd::{cross_entropy_value, Tape, Var};
use crate::error::{Error, Result};
use crate::gating::GateDistribution;
use crate::model::PAD;
use crate::tensor::{Tensor, LOG_CLAMP};

/// Average gate mass per expert, `qᵢ = (1/M) Σₘ Gᵢ⁽ᵐ⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceStat {
    pub q: Vec<f64>,
    /// Number of distributions averaged.
    pub m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            label_smoothing: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

pub fn balance_q(dists: &[GateDistribution]) -> Result<BalanceStat> {
    let first = dists
        .first()
        .ok_or_else(|| Error::Contract("balance statistic over zero gates".into()))?;
    let n = first.len();
    if let Some(bad) = dists.iter().find(|d| d.len() != n) {
        return Err(Error::Contract(format!(
            "gate distributions over {} and {} experts",
            n,
            bad.len()
        )));
    }
    let m = dists.len();
    let mut q = vec![0.0; n];
    for d in dists {
        for (acc, w) in q.iter_mut().zip(d.weights()) {
            *acc += w;
        }
    }
    for v in &mut q {
        *v /= m as f64;
    }
    Ok(BalanceStat { q, m })
}

/// `−Σᵢ ln max(qᵢ, 1e-12)`; minimized at the uniform point with value `N·ln N`.
pub fn balance_loss(stat: &BalanceStat) -> f64 {
    -stat.q.iter().map(|&q| q.max(LOG_CLAMP).ln()).sum::<f64>()
}

/// Targets with pad positions turned into `None`.
pub fn mask_pad(targets: &[usize]) -> Vec<Option<usize>> {
    targets.iter().map(|&t| (t != PAD).then_some(t)).collect()
}

/// Pad-masked targets extended with `None` to `rows` logits rows.
pub fn masked_targets(targets: &[usize], rows: usize) -> Result<Vec<Option<usize>>> {
    if targets.len() > rows {
        return Err(Error::Input(format!("{} targets for {rows} positions", targets.len())));
    }
    let mut out = mask_pad(targets);
    out.resize(rows, None);
    Ok(out)
}

/// Mean cross-entropy of row-wise `logits` over non-pad target positions.
pub fn domain_loss(logits: &Tensor, targets: &[usize], cfg: &LossConfig) -> Result<f64> {
    Ok(cross_entropy_value(logits, &masked_targets(targets, logits.rows())?, cfg.label_smoothing)?.item())
}

pub fn total_loss(domain: f64, balance: f64, cfg: &LossConfig) -> f64 {
    domain + cfg.alpha * balance
}

/// Balance loss on the tape from gate-distribution handles (each `[N]`).
pub fn balance_loss_on_tape(tape: &mut Tape, gates: &[Var]) -> Result<Var> {
    let first = *gates
        .first()
        .ok_or_else(|| Error::Contract("balance statistic over zero gates".into()))?;
    let mut acc = first;
    for &g in &gates[1..] {
        acc = tape.add(acc, g)?;
    }
    let q = tape.scale(acc, 1.0 / gates.len() as f64)?;
    let logq = tape.log(q)?;
    let s = tape.sum(logq)?;
    tape.scale(s, -1.0)
}

/// Total objective on the tape: `domain + α·balance` (balance skipped when α = 0).
pub fn total_loss_on_tape(tape: &mut Tape, domain: Var, gates: &[Var], cfg: &LossConfig) -> Result<Var> {
    if cfg.alpha == 0.0 || gates.is_empty() {
        return Ok(domain);
    }
    let b = balance_loss_on_tape(tape, gates)?;
    let scaled = tape.scale(b, cfg.alpha)?;
    tape.add(domain, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(w: &[f64]) -> GateDistribution {
        GateDistribution::new(w.to_vec()).unwrap()
    }

    #[test]
    fn single_distribution_is_its_own_q() {
        let s = balance_q(&[dist(&[0.2, 0.5, 0.3])]).unwrap();
        assert_eq!(s.q, vec![0.2, 0.5, 0.3]);
        assert_eq!(s.m, 1);
    }

    #[test]
    fn mirrored_pair() {
        let (a, b, c) = (0.6, 0.3, 0.1);
        let s = balance_q(&[dist(&[a, b, c]), dist(&[c, b, a])]).unwrap();
        assert!((s.q[0] - (a + c) / 2.0).abs() < 1e-15);
        assert!((s.q[1] - b).abs() < 1e-15);
        assert!((s.q[2] - (a + c) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn mixed_expert_counts_rejected() {
        let err = balance_q(&[dist(&[0.5, 0.5]), dist(&[1.0, 0.0, 0.0])]).unwrap_err();
        assert_eq!(err.kind(), "contract");
        assert!(balance_q(&[]).is_err());
    }

    #[test]
    fn balance_loss_values() {
        let u = BalanceStat { q: vec![1.0 / 3.0; 3], m: 1 };
        assert!((balance_loss(&u) - 3.0 * 3f64.ln()).abs() < 1e-12);
        let hot = BalanceStat { q: vec![1.0, 0.0, 0.0], m: 1 };
        let expected = -(1.0f64.ln()) - 2.0 * 1e-12f64.ln();
        assert!((balance_loss(&hot) - expected).abs() < 1e-9);
        assert!((balance_loss(&hot) - 55.26).abs() < 0.01);
    }

    #[test]
    fn domain_loss_values() {
        let cfg = LossConfig::default();
        let mut sure = Tensor::filled(&[2, 5], -1e3);
        sure.data_mut()[3] = 1e3;
        sure.data_mut()[5 + 1] = 1e3;
        assert!(domain_loss(&sure, &[3, 1], &cfg).unwrap() < 1e-12);
        let flat = Tensor::zeros(&[3, 5]);
        assert!((domain_loss(&flat, &[1, 2, 0], &cfg).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert_eq!(domain_loss(&flat, &[0, 0, 0], &cfg).unwrap_err().kind(), "contract");
    }

    #[test]
    fn total_loss_arithmetic() {
        let cfg = LossConfig { alpha: 0.5, label_smoothing: 0.0 };
        assert_eq!(total_loss(2.0, 3.0, &cfg), 3.5);
        let off = LossConfig { alpha: 0.0, ..cfg };
        assert_eq!(total_loss(2.0, 3.0, &off), 2.0);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { alpha: f64::NAN, label_smoothing: 0.0 }.validate().is_err());
        assert!(LossConfig { alpha: 0.5, label_smoothing: 1.0 }.validate().is_err());
    }

    #[test]
    fn tape_balance_matches_value_path() {
        let ds = [dist(&[0.7, 0.2, 0.1]), dist(&[0.1, 0.1, 0.8])];
        let mut tape = Tape::new();
        let vars: Vec<Var> = ds
            .iter()
            .map(|d| tape.constant(Tensor::vector(d.weights()).unwrap()).unwrap())
            .collect();
        let l = balance_loss_on_tape(&mut tape, &vars).unwrap();
        let direct = balance_loss(&balance_q(&ds).unwrap());
        assert!((tape.value(l).item() - direct).abs() < 1e-14);
    }
}
