//! Gating-only optimization with frozen base and experts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Var};
use crate::compose::{Composition, CompositionMode, CompositionPlan};
use crate::error::{Error, Result};
use crate::gating::{distribution_of, gating_entropy, GateDistribution, Granularity, Temperature};
use crate::losses::{balance_q, masked_targets, total_loss_on_tape, LossConfig};
use crate::lora::ExpertSet;
use crate::model::BaseWeights;
use crate::tasks::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub granularity: Granularity,
    pub log_every: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub label_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            steps: 400,
            batch_size: 8,
            alpha: 0.5,
            seed: 0,
            optimizer: OptimizerKind::default(),
            granularity: Granularity::Block,
            log_every: 10,
            clip_norm: 1.0,
            label_smoothing: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be >= 0".into()));
        }
        self.loss().validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            label_smoothing: self.label_smoothing,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// First-order optimizer over a list of flat parameter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Adam first/second moments, one pair per parameter buffer.
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
    pub t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, sizes: &[usize]) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam { .. } => sizes.iter().map(|&n| (vec![0.0; n], vec![0.0; n])).collect(),
        };
        Self {
            kind,
            learning_rate,
            moments,
            t: 0,
        }
    }

    /// Applies one update; `grads` are already clipped.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        self.t += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.iter_mut().zip(g) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Per-step RNG derived from the run seed, so resuming needs no RNG state.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

pub fn sample_batch(rng: &mut impl Rng, dataset_len: usize, batch_size: usize) -> Vec<usize> {
    (0..batch_size).map(|_| rng.gen_range(0..dataset_len)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyEntry {
    pub step: usize,
    pub entropy: f64,
    pub mean_weights: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntropyLog {
    pub entries: Vec<EntropyEntry>,
}

impl EntropyLog {
    /// CSV with header `step,entropy,w_0,...,w_{N-1}`.
    pub fn to_csv(&self) -> String {
        let n = self.entries.first().map_or(0, |e| e.mean_weights.len());
        let mut out = String::from("step,entropy");
        for i in 0..n {
            write!(out, ",w_{i}").unwrap();
        }
        out.push('\n');
        for e in &self.entries {
            write!(out, "{},{}", e.step, e.entropy).unwrap();
            for w in &e.mean_weights {
                write!(out, ",{w}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn at_step(&self, step: usize) -> Option<&EntropyEntry> {
        self.entries.iter().find(|e| e.step == step)
    }

    pub fn last(&self) -> Option<&EntropyEntry> {
        self.entries.last()
    }
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub plan: CompositionPlan,
    pub optimizer: Optimizer,
    pub step: usize,
    pub config_hash: String,
}

/// Per-step diagnostics.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Norm of the gradients reaching base weights and adapters.
    pub frozen_grad_norm: f64,
    pub gates: Vec<GateDistribution>,
}

pub struct GateTrainer<'a> {
    base: &'a BaseWeights,
    experts: &'a ExpertSet,
    plan: CompositionPlan,
    cfg: TrainConfig,
    optimizer: Optimizer,
    step: usize,
    log: EntropyLog,
}

impl<'a> GateTrainer<'a> {
    pub fn new(base: &'a BaseWeights, experts: &'a ExpertSet, plan: CompositionPlan, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if plan.mode != CompositionMode::Mole {
            return Err(Error::Contract(format!("gate training needs a mole plan, got {}", plan.mode.name())));
        }
        if plan.granularity != cfg.granularity {
            return Err(Error::Contract(format!(
                "plan granularity {} differs from configured {}",
                plan.granularity, cfg.granularity
            )));
        }
        plan.validate(base, experts.len())?;
        let sizes = param_sizes(&plan);
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &sizes);
        Ok(Self {
            base,
            experts,
            plan,
            cfg,
            optimizer,
            step: 0,
            log: EntropyLog::default(),
        })
    }

    pub fn from_checkpoint(
        base: &'a BaseWeights,
        experts: &'a ExpertSet,
        checkpoint: Checkpoint,
        cfg: TrainConfig,
    ) -> Result<Self> {
        if checkpoint.config_hash != cfg.hash() {
            return Err(Error::Contract("checkpoint was written under a different training config".into()));
        }
        let mut t = Self::new(base, experts, checkpoint.plan, cfg)?;
        if checkpoint.optimizer.moments.len() != t.optimizer.moments.len() {
            return Err(Error::Contract("checkpoint optimizer state does not match the plan".into()));
        }
        t.optimizer = checkpoint.optimizer;
        t.step = checkpoint.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            plan: self.plan.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            config_hash: self.cfg.hash(),
        }
    }

    pub fn plan(&self) -> &CompositionPlan {
        &self.plan
    }

    pub fn log(&self) -> &EntropyLog {
        &self.log
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, dataset: &Dataset) -> Result<StepReport> {
        if dataset.is_empty() {
            return Err(Error::Input("training dataset is empty".into()));
        }
        let step = self.step + 1;
        let mut rng = step_rng(self.cfg.seed, step);
        let batch = sample_batch(&mut rng, dataset.len(), self.cfg.batch_size);
        let divergence = |e: Error| match e {
            Error::NonFinite { .. } => Error::Divergence { step, loss: f64::NAN },
            other => other,
        };

        let mut tape = Tape::new();
        let comp = Composition::register(&mut tape, self.base, Some(self.experts), &self.plan, true)?;
        let (loss, gate_vars) = batch_loss(&mut tape, &comp, dataset, &batch, &self.cfg.loss()).map_err(divergence)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Divergence { step, loss: loss_value });
        }
        let grads = tape.backward(loss).map_err(divergence)?;

        let frozen: Vec<Var> = comp
            .base_vars()
            .all()
            .into_iter()
            .chain(comp.expert_vars().iter().flatten().flat_map(|b| b.all()))
            .collect();
        let frozen_grad_norm = grads.global_norm(&frozen);

        let params: Vec<Var> = comp.gate_vars().iter().flat_map(|g| g.params()).collect();
        let mut flat: Vec<Vec<f64>> = params.iter().map(|v| grads.wrt(*v).data().to_vec()).collect();
        let grad_norm = clip_global_norm(&mut flat, self.cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { step, loss: loss_value });
        }

        let gates: Vec<GateDistribution> = gate_vars.iter().map(|g| distribution_of(&tape, *g)).collect();
        drop(comp);
        self.apply_update(&flat);
        self.step = step;
        if step.is_multiple_of(self.cfg.log_every) {
            self.log.entries.push(entropy_entry(step, &gates)?);
        }
        Ok(StepReport {
            step,
            loss: loss_value,
            grad_norm,
            frozen_grad_norm,
            gates,
        })
    }

    fn apply_update(&mut self, grads: &[Vec<f64>]) {
        let mut buffers: Vec<&mut [f64]> = Vec::new();
        for u in &mut self.plan.units {
            buffers.push(u.e.data_mut());
            if let Temperature::Learned { raw } = &mut u.temperature {
                buffers.push(std::slice::from_mut(raw));
            }
        }
        self.optimizer.step(&mut buffers, grads);
    }

    pub fn run(mut self, dataset: &Dataset) -> Result<TrainOutcome> {
        while self.step < self.cfg.steps {
            self.step(dataset)?;
        }
        let checkpoint = self.checkpoint();
        Ok(TrainOutcome {
            plan: self.plan,
            log: self.log,
            checkpoint,
        })
    }
}

fn param_sizes(plan: &CompositionPlan) -> Vec<usize> {
    plan.units
        .iter()
        .flat_map(|u| {
            let tau = matches!(u.temperature, Temperature::Learned { .. }).then_some(1);
            std::iter::once(u.e.len()).chain(tau)
        })
        .collect()
}

fn entropy_entry(step: usize, gates: &[GateDistribution]) -> Result<EntropyEntry> {
    Ok(EntropyEntry {
        step,
        entropy: gating_entropy(gates)?,
        mean_weights: balance_q(gates)?.q,
    })
}

/// Mean domain loss over a batch plus the balance term; returns the loss
/// and every gate distribution produced (attach points × batch).
pub fn batch_loss(
    tape: &mut Tape,
    comp: &Composition<'_>,
    dataset: &Dataset,
    batch: &[usize],
    loss_cfg: &LossConfig,
) -> Result<(Var, Vec<Var>)> {
    let mut domain: Option<Var> = None;
    let mut gates = Vec::new();
    for &i in batch {
        let ex = &dataset.examples[i];
        let out = comp.forward(tape, &ex.input)?;
        let targets = masked_targets(&ex.target, tape.value(out.logits).rows())?;
        let ce = tape.cross_entropy(out.logits, &targets, loss_cfg.label_smoothing)?;
        domain = Some(match domain {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
        gates.extend(out.gates);
    }
    let domain = domain.ok_or_else(|| Error::Input("empty batch".into()))?;
    let domain = tape.scale(domain, 1.0 / batch.len() as f64)?;
    let loss = total_loss_on_tape(tape, domain, &gates, loss_cfg)?;
    Ok((loss, gates))
}

/// Gradients of the batch objective with respect to every gate parameter,
/// in plan order (`e` then raw temperature per unit).
pub fn gate_gradients(
    base: &BaseWeights,
    experts: &ExpertSet,
    plan: &CompositionPlan,
    dataset: &Dataset,
    batch: &[usize],
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let comp = Composition::register(&mut tape, base, Some(experts), plan, true)?;
    let (loss, _) = batch_loss(&mut tape, &comp, dataset, batch, loss_cfg)?;
    let grads: Gradients = tape.backward(loss)?;
    let out = comp
        .gate_vars()
        .iter()
        .flat_map(|g| g.params())
        .map(|v| grads.wrt(v).data().to_vec())
        .collect();
    Ok((tape.value(loss).item(), out))
}

/// Batch objective value without gradients.
pub fn batch_objective(
    base: &BaseWeights,
    experts: &ExpertSet,
    plan: &CompositionPlan,
    dataset: &Dataset,
    batch: &[usize],
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let comp = Composition::register(&mut tape, base, Some(experts), plan, false)?;
    let (loss, _) = batch_loss(&mut tape, &comp, dataset, batch, loss_cfg)?;
    Ok(tape.value(loss).item())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub plan: CompositionPlan,
    pub log: EntropyLog,
    pub checkpoint: Checkpoint,
}

/// Trains only the gating parameters of `plan`; base weights and experts
/// stay untouched.
pub fn train_gating(
    base: &BaseWeights,
    experts: &ExpertSet,
    plan: CompositionPlan,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    GateTrainer::new(base, experts, plan, cfg.clone())?.run(dataset)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Token accuracy over non-pad target positions.
    pub accuracy: f64,
    pub mean_domain_loss: f64,
    /// Mean gate weight per expert over all examples and attach points.
    pub per_expert_gate: Option<Vec<f64>>,
    pub mean_gate_entropy: Option<f64>,
    pub per_task_accuracy: BTreeMap<usize, f64>,
}

/// Read-only evaluation of a composition on a dataset.
pub fn evaluate(base: &BaseWeights, experts: Option<&ExpertSet>, plan: &CompositionPlan, dataset: &Dataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Input("evaluation dataset is empty".into()));
    }
    let mut tape = Tape::new();
    let comp = Composition::register(&mut tape, base, experts, plan, false)?;
    let checkpoint_len = tape.len();
    let (mut hits, mut total) = (0usize, 0usize);
    let mut per_task: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut loss_sum = 0.0;
    let mut gates = Vec::new();
    for ex in &dataset.examples {
        let out = comp.forward(&mut tape, &ex.input)?;
        let logits = tape.value(out.logits);
        let targets = masked_targets(&ex.target, logits.rows())?;
        let ce = crate::autograd::cross_entropy_value(logits, &targets, 0.0)?;
        loss_sum += ce.item();
        let vocab = logits.cols();
        let slot = per_task.entry(ex.task_id).or_default();
        for (p, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &logits.data()[p * vocab..(p + 1) * vocab];
            let pred = argmax(row);
            let hit = usize::from(pred == t);
            hits += hit;
            total += 1;
            slot.0 += hit;
            slot.1 += 1;
        }
        gates.extend(out.gates.iter().map(|g| distribution_of(&tape, *g)));
        tape.truncate(checkpoint_len);
    }
    let (per_expert_gate, mean_gate_entropy) = if gates.is_empty() {
        (None, None)
    } else {
        (Some(balance_q(&gates)?.q), Some(gating_entropy(&gates)?))
    };
    Ok(Metrics {
        accuracy: hits as f64 / total.max(1) as f64,
        mean_domain_loss: loss_sum / dataset.len() as f64,
        per_expert_gate,
        mean_gate_entropy,
        per_task_accuracy: per_task
            .into_iter()
            .map(|(k, (h, n))| (k, h as f64 / n.max(1) as f64))
            .collect(),
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub tau: f64,
    pub metrics: Metrics,
    pub final_entropy: f64,
    pub log: EntropyLog,
}

/// Trains one gate set per temperature with τ frozen and the balance loss
/// disabled, then evaluates each on `dataset`.
pub fn temperature_sweep(
    base: &BaseWeights,
    experts: &ExpertSet,
    dataset: &Dataset,
    taus: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if let Some(bad) = taus.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::Contract(format!("temperature must be positive, got {bad}")));
    }
    let cfg = TrainConfig { alpha: 0.0, ..cfg.clone() };
    taus.iter()
        .map(|&tau| {
            let plan = CompositionPlan::mole(base, experts.len(), cfg.granularity, cfg.seed)?.with_fixed_temperature(tau)?;
            let out = train_gating(base, experts, plan, dataset, &cfg)?;
            let metrics = evaluate(base, Some(experts), &out.plan, dataset)?;
            let final_entropy = metrics.mean_gate_entropy.unwrap_or(0.0);
            Ok(SweepRow {
                tau,
                metrics,
                final_entropy,
                log: out.log,
            })
        })
        .collect()
}
