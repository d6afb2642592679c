//! Gating over LoRA expert outputs.
//!
//! A gating unit sits at one attach point. It RMS-normalizes each expert's
//! output, concatenates and flattens them, reduces the result to one logit
//! per expert with a learnable matrix `e`, and turns the logits into a
//! distribution with a temperature softmax. The unit's output is then added
//! to the frozen path's output.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{check_simplex, MatrixId};
use crate::model::{MatrixRole, ModelConfig, Sublayer};
use crate::tensor::{softplus, softplus_inverse, Tensor};

/// Lower bound added to the softplus temperature.
pub const TAU_MIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Matrix,
    Layer,
    Block,
    Network,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [
        Granularity::Matrix,
        Granularity::Layer,
        Granularity::Block,
        Granularity::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Matrix => "matrix",
            Granularity::Layer => "layer",
            Granularity::Block => "block",
            Granularity::Network => "network",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown granularity '{s}' (matrix|layer|block|network)")))
    }
}

/// Where in the model a gating unit mixes expert outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttachPoint {
    Matrix(MatrixId),
    Layer { block: usize, sublayer: Sublayer },
    Block(usize),
    Network,
}

impl AttachPoint {
    pub fn granularity(&self) -> Granularity {
        match self {
            AttachPoint::Matrix(_) => Granularity::Matrix,
            AttachPoint::Layer { .. } => Granularity::Layer,
            AttachPoint::Block(_) => Granularity::Block,
            AttachPoint::Network => Granularity::Network,
        }
    }

    /// Width of the activation the experts produce here.
    pub fn width(&self, cfg: &ModelConfig) -> usize {
        match self {
            AttachPoint::Matrix(id) => id.role.shape(cfg).0,
            _ => cfg.d_model,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "net" {
            return Some(AttachPoint::Network);
        }
        if let Some(id) = MatrixId::parse(s) {
            return Some(AttachPoint::Matrix(id));
        }
        let rest = s.strip_prefix('b')?;
        match rest.split_once('.') {
            None => rest.parse().ok().map(AttachPoint::Block),
            Some((b, "attn")) => Some(AttachPoint::Layer {
                block: b.parse().ok()?,
                sublayer: Sublayer::Attention,
            }),
            Some((b, "ffn")) => Some(AttachPoint::Layer {
                block: b.parse().ok()?,
                sublayer: Sublayer::Ffn,
            }),
            _ => None,
        }
    }
}

impl fmt::Display for AttachPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttachPoint::Matrix(id) => write!(f, "{id}"),
            AttachPoint::Layer { block, sublayer } => {
                let s = match sublayer {
                    Sublayer::Attention => "attn",
                    Sublayer::Ffn => "ffn",
                };
                write!(f, "b{block}.{s}")
            }
            AttachPoint::Block(k) => write!(f, "b{k}"),
            AttachPoint::Network => f.write_str("net"),
        }
    }
}

/// Attach points implied by a granularity, in forward order.
pub fn enumerate_attach_points(cfg: &ModelConfig, granularity: Granularity) -> Vec<AttachPoint> {
    let blocks = 0..cfg.n_blocks;
    match granularity {
        Granularity::Matrix => blocks
            .flat_map(|b| {
                MatrixRole::LORA_TARGETS
                    .into_iter()
                    .map(move |r| AttachPoint::Matrix(MatrixId::new(b, r)))
            })
            .collect(),
        Granularity::Layer => blocks
            .flat_map(|block| {
                [Sublayer::Attention, Sublayer::Ffn]
                    .into_iter()
                    .map(move |sublayer| AttachPoint::Layer { block, sublayer })
            })
            .collect(),
        Granularity::Block => blocks.map(AttachPoint::Block).collect(),
        Granularity::Network => vec![AttachPoint::Network],
    }
}

/// Gate temperature. Learned temperatures are kept positive as
/// `softplus(raw) + TAU_MIN`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temperature {
    Learned { raw: f64 },
    Fixed { tau: f64 },
}

impl Temperature {
    /// Learned temperature starting at `tau` (must exceed `TAU_MIN`).
    pub fn learned(tau: f64) -> Result<Self> {
        if !(tau > TAU_MIN) || !tau.is_finite() {
            return Err(Error::Contract(format!("learned temperature must exceed {TAU_MIN}, got {tau}")));
        }
        Ok(Temperature::Learned {
            raw: softplus_inverse(tau - TAU_MIN),
        })
    }

    pub fn fixed(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
        }
        Ok(Temperature::Fixed { tau })
    }

    pub fn tau(&self) -> f64 {
        match *self {
            Temperature::Learned { raw } => softplus(raw) + TAU_MIN,
            Temperature::Fixed { tau } => tau,
        }
    }
}

/// One learnable gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingUnit {
    pub attach_point: AttachPoint,
    /// ξ × N reduction matrix.
    pub e: Tensor,
    pub temperature: Temperature,
}

impl GatingUnit {
    /// `e ~ N(0, 1/√ξ)`, learned temperature starting at 1.
    pub fn init<R: Rng + ?Sized>(attach_point: AttachPoint, cfg: &ModelConfig, n_experts: usize, rng: &mut R) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::Contract("a gate needs at least one expert".into()));
        }
        let xi = n_experts * cfg.max_seq_len * attach_point.width(cfg);
        Ok(Self {
            attach_point,
            e: Tensor::randn(&[xi, n_experts], 1.0 / (xi as f64).sqrt(), rng),
            temperature: Temperature::learned(1.0)?,
        })
    }

    pub fn granularity(&self) -> Granularity {
        self.attach_point.granularity()
    }

    pub fn n_experts(&self) -> usize {
        self.e.cols()
    }

    pub fn xi(&self) -> usize {
        self.e.rows()
    }

    pub fn tau(&self) -> f64 {
        self.temperature.tau()
    }
}

/// Per-expert weights on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDistribution {
    weights: Vec<f64>,
}

impl GateDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_simplex(&weights, "gate weights")?;
        Ok(Self { weights })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Shannon entropy in nats, with `0·ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .weights
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|&w| w * w.ln())
            .sum::<f64>()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.weights)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Which experts stay active at inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertMask {
    keep: Vec<bool>,
}

impl ExpertMask {
    pub fn new(keep: Vec<bool>) -> Result<Self> {
        if !keep.iter().any(|&k| k) {
            return Err(Error::Contract("expert mask must keep at least one expert".into()));
        }
        Ok(Self { keep })
    }

    pub fn all(n: usize) -> Self {
        Self { keep: vec![true; n] }
    }

    /// Keeps only expert `j` of `n`.
    pub fn only(n: usize, j: usize) -> Self {
        Self {
            keep: (0..n).map(|i| i == j).collect(),
        }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    fn as_tensor(&self) -> Tensor {
        let v: Vec<f64> = self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Tensor::vector(&v).expect("mask is non-empty")
    }
}

impl FromStr for ExpertMask {
    type Err = Error;

    /// Comma-separated `1`/`0` flags.
    fn from_str(s: &str) -> Result<Self> {
        let keep = s
            .split(',')
            .map(|t| match t.trim() {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(Error::Input(format!("mask entries must be 0 or 1, got '{other}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        ExpertMask::new(keep)
    }
}

fn check_same_shapes(outputs: &[&Tensor], op: &'static str) -> Result<()> {
    let first = outputs.first().ok_or_else(|| Error::dim(op, "no expert outputs"))?;
    if let Some(bad) = outputs.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::dim(op, format!("{:?} vs {:?}", bad.shape(), first.shape())));
    }
    Ok(())
}

/// RMS-normalizes each expert output, concatenates them in expert order and
/// flattens to length `N·L·d`.
pub fn normalize_concat(outputs: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = outputs.iter().collect();
    check_same_shapes(&refs, "normalize_concat")?;
    let normed: Vec<Tensor> = outputs.iter().map(|t| t.rms_normalize().flatten()).collect();
    let refs: Vec<&Tensor> = normed.iter().collect();
    Tensor::concat(&refs, 0)
}

/// `ε = e_Ωᵀ · e`.
pub fn gate_logits(e_omega: &Tensor, e: &Tensor) -> Result<Tensor> {
    if e_omega.rank() != 1 || e.rank() != 2 || e.rows() != e_omega.len() {
        return Err(Error::dim(
            "gate_logits",
            format!("features {:?} against reduction {:?}", e_omega.shape(), e.shape()),
        ));
    }
    let row = e_omega.reshape(&[1, e_omega.len()])?;
    row.matmul(e)?.reshape(&[e.cols()])
}

/// `Gᵢ = exp(εᵢ/τ) / Σⱼ exp(εⱼ/τ)`.
pub fn gate_softmax(eps: &Tensor, tau: f64) -> Result<GateDistribution> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    if eps.rank() != 1 {
        return Err(Error::dim("gate_softmax", format!("logits must be a vector, got {:?}", eps.shape())));
    }
    let scaled = eps.map(|v| v / tau).ensure_finite("gate_softmax")?;
    Ok(GateDistribution {
        weights: scaled.softmax(0)?.into_data(),
    })
}

/// `Σᵢ Gᵢ · Eᵢ`.
pub fn mix_outputs(g: &GateDistribution, outputs: &[Tensor]) -> Result<Tensor> {
    if g.len() != outputs.len() {
        return Err(Error::dim(
            "mix_outputs",
            format!("{} gate weights for {} outputs", g.len(), outputs.len()),
        ));
    }
    let refs: Vec<&Tensor> = outputs.iter().collect();
    check_same_shapes(&refs, "mix_outputs")?;
    let mut acc = Tensor::zeros(outputs[0].shape());
    for (w, t) in g.weights.iter().zip(outputs) {
        acc.add_scaled_in_place(t, *w)?;
    }
    Ok(acc)
}

/// Zeroes masked experts and rescales the rest proportionally.
pub fn apply_mask_renormalize(g: &GateDistribution, mask: &ExpertMask) -> Result<GateDistribution> {
    if g.len() != mask.len() {
        return Err(Error::dim(
            "apply_mask_renormalize",
            format!("{} weights for a mask of {}", g.len(), mask.len()),
        ));
    }
    if mask.keep.iter().all(|&k| k) {
        return Ok(g.clone());
    }
    let kept: Vec<f64> = g
        .weights
        .iter()
        .zip(&mask.keep)
        .map(|(&w, &k)| if k { w } else { 0.0 })
        .collect();
    let mass: f64 = kept.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::DegenerateMask);
    }
    Ok(GateDistribution {
        weights: kept.into_iter().map(|w| w / mass).collect(),
    })
}

/// Mean entropy over a set of gate distributions.
pub fn gating_entropy(dists: &[GateDistribution]) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::Contract("entropy of an empty set of gates".into()));
    }
    Ok(dists.iter().map(GateDistribution::entropy).sum::<f64>() / dists.len() as f64)
}

/// Classic token-level MoE router: softmax over `h·eᵢ` plus the indices of
/// the `k` largest gates (lower index wins ties).
pub fn moe_topk_reference(h: &Tensor, expert_embeddings: &Tensor, k: usize) -> Result<(GateDistribution, Vec<usize>)> {
    if expert_embeddings.rank() != 2 || h.rank() != 1 || expert_embeddings.cols() != h.len() {
        return Err(Error::dim(
            "moe_topk_reference",
            format!("h {:?} against embeddings {:?}", h.shape(), expert_embeddings.shape()),
        ));
    }
    let n = expert_embeddings.rows();
    if k == 0 || k > n {
        return Err(Error::Contract(format!("k = {k} outside 1..={n}")));
    }
    let row = h.reshape(&[1, h.len()])?;
    let logits = row.linear(expert_embeddings)?.reshape(&[n])?;
    let g = gate_softmax(&logits, 1.0)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| g.weights[b].total_cmp(&g.weights[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok((g, order))
}

/// Tape handles of one gating unit.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub e: Var,
    /// Raw temperature parameter; `None` when the temperature is fixed.
    pub tau_raw: Option<Var>,
    pub tau: Var,
}

impl GateVars {
    pub fn register(tape: &mut Tape, unit: &GatingUnit, trainable: bool) -> Result<Self> {
        let e = tape.leaf(unit.e.clone().with_requires_grad(trainable))?;
        let (tau_raw, tau) = match unit.temperature {
            Temperature::Learned { raw } => {
                let r = tape.leaf(Tensor::scalar(raw).with_requires_grad(trainable))?;
                let sp = tape.softplus(r)?;
                (Some(r), tape.add_const(sp, TAU_MIN)?)
            }
            Temperature::Fixed { tau } => (None, tape.constant(Tensor::scalar(tau))?),
        };
        Ok(Self { e, tau_raw, tau })
    }

    pub fn params(&self) -> Vec<Var> {
        std::iter::once(self.e).chain(self.tau_raw).collect()
    }
}

/// Gate distribution (shape `[N]`) computed on the tape from expert outputs.
pub fn gate_on_tape(tape: &mut Tape, gate: &GateVars, outputs: &[Var], mask: Option<&ExpertMask>) -> Result<Var> {
    let shapes: Vec<&Tensor> = outputs.iter().map(|v| tape.value(*v)).collect();
    check_same_shapes(&shapes, "normalize_concat")?;
    let n = outputs.len();
    let mut parts = Vec::with_capacity(n);
    for &o in outputs {
        let normed = tape.rms_normalize(o)?;
        parts.push(tape.flatten(normed)?);
    }
    let cat = if n == 1 { parts[0] } else { tape.concat(&parts, 0)? };
    let xi = tape.value(cat).len();
    let e_shape = tape.value(gate.e).shape().to_vec();
    if e_shape != [xi, n] {
        return Err(Error::dim(
            "gate_logits",
            format!("reduction matrix {e_shape:?} for {n} experts of total size {xi}"),
        ));
    }
    let row = tape.reshape(cat, &[1, xi])?;
    let eps = tape.matmul(row, gate.e)?;
    let eps = tape.reshape(eps, &[n])?;
    let scaled = tape.div_scalar(eps, gate.tau)?;
    let g = tape.softmax(scaled, 0)?;
    match mask {
        // Keeping every expert is an exact no-op rather than a renormalization
        // by a mass that may be off by an ulp.
        None => Ok(g),
        Some(mask) if mask.keep.iter().all(|&k| k) && mask.len() == n => Ok(g),
        Some(mask) => {
            if mask.len() != n {
                return Err(Error::dim("mask", format!("mask of {} for {n} experts", mask.len())));
            }
            let m = tape.constant(mask.as_tensor())?;
            let kept = tape.mul(g, m)?;
            let mass = tape.sum(kept)?;
            if !(tape.value(mass).item() > 0.0) {
                return Err(Error::DegenerateMask);
            }
            tape.div_scalar(kept, mass)
        }
    }
}

/// How gated expert outputs join the frozen path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixRule {
    /// `O = F + Σ Gᵢ·Eᵢ`.
    #[default]
    Literal,
    /// `O = F + Σ Gᵢ·(Eᵢ − F)`; keeps the residual stream at unit scale.
    DeltaMix,
}

impl FromStr for MixRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(MixRule::Literal),
            "delta-mix" => Ok(MixRule::DeltaMix),
            _ => Err(Error::Input(format!("unknown mix rule '{s}' (literal|delta-mix)"))),
        }
    }
}

impl fmt::Display for MixRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixRule::Literal => "literal",
            MixRule::DeltaMix => "delta-mix",
        })
    }
}

/// Combines the frozen output with the gated expert outputs.
pub fn combine_on_tape(tape: &mut Tape, frozen: Var, outputs: &[Var], gate: Var, rule: MixRule) -> Result<Var> {
    let mut acc = frozen;
    for (i, &o) in outputs.iter().enumerate() {
        let term = match rule {
            MixRule::Literal => o,
            MixRule::DeltaMix => tape.sub(o, frozen)?,
        };
        let gi = tape.index(gate, i)?;
        let weighted = tape.mul_scalar(term, gi)?;
        acc = tape.add(acc, weighted)?;
    }
    Ok(acc)
}

/// Reads a gate distribution off the tape.
pub fn distribution_of(tape: &Tape, g: Var) -> GateDistribution {
    GateDistribution {
        weights: tape.value(g).data().to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn attach_point_counts() {
        let cfg = ModelConfig::default();
        assert_eq!(enumerate_attach_points(&cfg, Granularity::Network).len(), 1);
        assert_eq!(enumerate_attach_points(&cfg, Granularity::Block).len(), 4);
        assert_eq!(enumerate_attach_points(&cfg, Granularity::Layer).len(), 8);
        assert_eq!(
            enumerate_attach_points(&cfg, Granularity::Matrix).len(),
            MatrixRole::LORA_TARGETS.len() * cfg.n_blocks
        );
    }

    #[test]
    fn attach_points_round_trip_through_text() {
        let cfg = ModelConfig::default();
        for g in Granularity::ALL {
            for p in enumerate_attach_points(&cfg, g) {
                assert_eq!(AttachPoint::parse(&p.to_string()), Some(p));
                assert_eq!(p.granularity(), g);
            }
        }
        assert_eq!("layer".parse::<Granularity>().unwrap(), Granularity::Layer);
        assert!("row".parse::<Granularity>().is_err());
    }

    #[test]
    fn xi_matches_expert_count_times_activation() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = GatingUnit::init(AttachPoint::Block(0), &cfg, 3, &mut rng).unwrap();
        assert_eq!(u.xi(), 3 * 16 * 32);
        let m = GatingUnit::init(
            AttachPoint::Matrix(MatrixId::new(0, MatrixRole::FfnUp)),
            &cfg,
            3,
            &mut rng,
        )
        .unwrap();
        assert_eq!(m.xi(), 3 * 16 * 64);
        assert!((u.tau() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_concat_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[4, 3], 2.0, &mut rng);
        let one = normalize_concat(std::slice::from_ref(&a)).unwrap();
        assert_eq!(one.len(), 12);
        let same = normalize_concat(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(&same.data()[..12], &same.data()[12..]);
        let b = Tensor::randn(&[4, 3], 0.1, &mut rng);
        let mixed = normalize_concat(&[a, b]).unwrap();
        for seg in mixed.data().chunks(12) {
            let rms = (seg.iter().map(|v| v * v).sum::<f64>() / 12.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-8);
        }
        assert!(normalize_concat(&[Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 3])]).is_err());
    }

    #[test]
    fn gate_logits_cases() {
        let x = Tensor::vector(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(gate_logits(&x, &Tensor::zeros(&[3, 2])).unwrap().data(), &[0.0, 0.0]);
        let pick = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(gate_logits(&x, &pick).unwrap().data(), &[3.0, -2.0]);
        assert_eq!(gate_logits(&x, &Tensor::zeros(&[2, 2])).unwrap_err().kind(), "dimension");
    }

    #[test]
    fn gate_softmax_cases() {
        let eq = gate_softmax(&Tensor::vector(&[0.7; 4]).unwrap(), 1.3).unwrap();
        assert!(close(eq.weights(), &[0.25; 4], 1e-15));
        let eps = Tensor::vector(&[0.0, 2f64.ln(), 4f64.ln()]).unwrap();
        let g = gate_softmax(&eps, 1.0).unwrap();
        assert!(close(g.weights(), &[1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0], 1e-15));
        let hot = gate_softmax(&eps, 100.0).unwrap();
        assert!(hot.weights().iter().all(|w| (w - 1.0 / 3.0).abs() < 0.01));
        assert_eq!(gate_softmax(&eps, 0.0).unwrap_err().kind(), "contract");
        assert!(gate_softmax(&eps, -1.0).is_err());
    }

    #[test]
    fn mix_outputs_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let outs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[2, 2], 1.0, &mut rng)).collect();
        let hot = GateDistribution::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(mix_outputs(&hot, &outs).unwrap(), outs[1]);
        let same = vec![outs[0].clone(); 3];
        let mixed = mix_outputs(&GateDistribution::uniform(3), &same).unwrap();
        assert!(mixed.max_abs_diff(&outs[0]) < 1e-15);
        assert!(mix_outputs(&hot, &outs[..2]).is_err());
    }

    #[test]
    fn mask_renormalize_cases() {
        let g = GateDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let m = ExpertMask::new(vec![true, true, false]).unwrap();
        let r = apply_mask_renormalize(&g, &m).unwrap();
        assert_eq!(r.weights()[0], 0.625);
        assert!((r.weights()[1] - 0.375).abs() <= f64::EPSILON);
        assert_eq!(r.weights()[2], 0.0);
        assert_eq!(apply_mask_renormalize(&g, &ExpertMask::all(3)).unwrap(), g);
        let u = GateDistribution::uniform(5);
        let drop2 = ExpertMask::new(vec![true, false, true, false, true]).unwrap();
        let r = apply_mask_renormalize(&u, &drop2).unwrap();
        assert!(close(r.weights(), &[1.0 / 3.0, 0.0, 1.0 / 3.0, 0.0, 1.0 / 3.0], 1e-15));
        let dead = GateDistribution::new(vec![1.0, 0.0]).unwrap();
        let err = apply_mask_renormalize(&dead, &ExpertMask::only(2, 1)).unwrap_err();
        assert_eq!(err.kind(), "degenerate-mask");
    }

    #[test]
    fn mask_parsing() {
        let m: ExpertMask = "1,0,1".parse().unwrap();
        assert_eq!(m.keep(), &[true, false, true]);
        assert_eq!("0,0".parse::<ExpertMask>().unwrap_err().kind(), "contract");
        assert!("1,2".parse::<ExpertMask>().is_err());
    }

    #[test]
    fn entropy_cases() {
        let u = vec![GateDistribution::uniform(3); 4];
        assert!((gating_entropy(&u).unwrap() - 3f64.ln()).abs() < 1e-15);
        let hot = vec![GateDistribution::new(vec![0.0, 0.0, 1.0]).unwrap(); 2];
        assert_eq!(gating_entropy(&hot).unwrap(), 0.0);
        assert!(gating_entropy(&[]).is_err());
    }

    #[test]
    fn topk_cases() {
        let emb = Tensor::eye(4);
        let h = Tensor::vector(&[0.0, 0.0, 1.0, 0.0]).unwrap();
        let (g, all) = moe_topk_reference(&h, &emb, 4).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(g.argmax(), 2);
        assert_eq!(all[0], 2);
        // remaining three tie; lower index first
        assert_eq!(&all[1..], &[0, 1, 3]);
        assert_eq!(moe_topk_reference(&h, &emb, 0).unwrap_err().kind(), "contract");
        assert!(moe_topk_reference(&h, &emb, 5).is_err());
    }

    #[test]
    fn temperature_parametrizations() {
        let t = Temperature::learned(2.5).unwrap();
        assert!((t.tau() - 2.5).abs() < 1e-12);
        assert!(Temperature::learned(0.01).is_err());
        assert_eq!(Temperature::fixed(0.01).unwrap().tau(), 0.01);
        assert!(Temperature::fixed(0.0).is_err());
    }
}
