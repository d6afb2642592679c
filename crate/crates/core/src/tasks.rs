//! Synthetic token-mapping tasks, a neutral pretraining recipe for the base
//! model, and toy LoRA expert training.

use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::compose::CompositionPlan;
use crate::error::{Error, Result};
use crate::lora::{check_simplex, register_trainable_expert, ExpertSet, LoraAdapter, DEFAULT_SCALING};
use crate::losses::masked_targets;
use crate::model::{base_forward, BaseWeights, ModelConfig, WeightVars, PAD};
use crate::training::{clip_global_norm, evaluate, sample_batch, step_rng, Optimizer, OptimizerKind};

/// Task tag carried by examples of the neutral copy task.
pub const NEUTRAL_TASK_ID: usize = 1000;
/// Probability that a generated position is drawn from the task's own slice.
pub const SLICE_TOKEN_PROB: f64 = 0.6;

/// A bijection on the contiguous vocab slice `start..start + perm.len()`;
/// tokens outside the slice map to themselves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRule {
    start: usize,
    perm: Vec<usize>,
}

impl TokenRule {
    pub fn identity(slice: Range<usize>) -> Self {
        Self {
            start: slice.start,
            perm: (0..slice.len()).collect(),
        }
    }

    /// A uniformly random permutation of the slice, fixed by `seed`.
    pub fn permutation(slice: Range<usize>, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..slice.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self {
            start: slice.start,
            perm,
        }
    }

    pub fn from_permutation(start: usize, perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Contract(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(Self { start, perm })
    }

    pub fn slice(&self) -> Range<usize> {
        self.start..self.start + self.perm.len()
    }

    pub fn apply(&self, t: usize) -> usize {
        if self.slice().contains(&t) {
            self.start + self.perm[t - self.start]
        } else {
            t
        }
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        Self {
            start: self.start,
            perm: inv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task_id: usize,
    pub rule: TokenRule,
    /// Tokens used as filler around task tokens; never includes pad.
    pub shared: Range<usize>,
    pub seq_len: usize,
    pub examples_count: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// Standard layout: the vocab is cut into quarters; the first (minus
    /// pad) is shared filler and task `i` permutes quarter `i + 1`.
    /// The permutation depends only on `task_id`, so train and eval sets
    /// drawn with different seeds share a rule.
    pub fn standard(cfg: &ModelConfig, task_id: usize, examples_count: usize, seed: u64) -> Result<Self> {
        let w = cfg.vocab_size / 4;
        if w < 2 || task_id >= 3 {
            return Err(Error::Contract(format!(
                "standard layout supports task ids 0..3 on vocab >= 8, got task {task_id} on vocab {}",
                cfg.vocab_size
            )));
        }
        let slice = (task_id + 1) * w..(task_id + 2) * w;
        Ok(Self {
            task_id,
            rule: TokenRule::permutation(slice, 0x7A5C_0000 + task_id as u64),
            shared: 1..w,
            seq_len: cfg.max_seq_len,
            examples_count,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let slice = self.rule.slice();
        if slice.is_empty() || self.shared.is_empty() || self.seq_len == 0 {
            return Err(Error::Contract("task needs a non-empty slice, filler set and length".into()));
        }
        if self.shared.contains(&PAD) || slice.contains(&PAD) {
            return Err(Error::Contract("pad token cannot be a task or filler token".into()));
        }
        if overlaps(&slice, &self.shared) {
            return Err(Error::Contract(format!(
                "task {} slice {slice:?} overlaps its filler tokens {:?}",
                self.task_id, self.shared
            )));
        }
        Ok(())
    }

    fn max_token(&self) -> usize {
        self.rule.slice().end.max(self.shared.end)
    }
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Rejects spec lists whose rules act on overlapping vocab slices.
pub fn check_disjoint(specs: &[SyntheticTaskSpec]) -> Result<()> {
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            if overlaps(&a.rule.slice(), &b.rule.slice()) {
                return Err(Error::Contract(format!(
                    "tasks {} and {} act on overlapping vocab slices {:?} and {:?}",
                    a.task_id,
                    b.task_id,
                    a.rule.slice(),
                    b.rule.slice()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub task_id: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn max_token(&self) -> Option<usize> {
        self.examples.iter().flat_map(|e| e.input.iter().chain(&e.target)).copied().max()
    }

    /// One line per example: `input ids<TAB>target ids<TAB>task id`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        for e in &self.examples {
            writeln!(out, "{}\t{}\t{}", join(&e.input), join(&e.target), e.task_id).unwrap();
        }
        out
    }

    pub fn from_tsv(text: &str, split: Split) -> Result<Self> {
        let parse_ids = |s: &str, line: usize| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| Error::Input(format!("dataset line {line}: bad token id '{t}'")))
                })
                .collect()
        };
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let n = i + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            let [input, target, task] = fields[..] else {
                return Err(Error::Input(format!("dataset line {n}: expected 3 tab-separated fields")));
            };
            let input = parse_ids(input, n)?;
            let target = parse_ids(target, n)?;
            if input.len() != target.len() || input.is_empty() {
                return Err(Error::Input(format!(
                    "dataset line {n}: input and target lengths {} and {} must match and be non-zero",
                    input.len(),
                    target.len()
                )));
            }
            let task_id = task
                .trim()
                .parse()
                .map_err(|_| Error::Input(format!("dataset line {n}: bad task id '{task}'")))?;
            examples.push(Example { input, target, task_id });
        }
        Ok(Self { examples, split })
    }
}

fn draw_example(spec: &SyntheticTaskSpec, rng: &mut impl Rng) -> Example {
    let min_len = (spec.seq_len / 2).max(1);
    let len = rng.gen_range(min_len..=spec.seq_len);
    let slice = spec.rule.slice();
    let input: Vec<usize> = (0..len)
        .map(|_| {
            if rng.gen_bool(SLICE_TOKEN_PROB) {
                rng.gen_range(slice.clone())
            } else {
                rng.gen_range(spec.shared.clone())
            }
        })
        .collect();
    let target = input.iter().map(|&t| spec.rule.apply(t)).collect();
    Example {
        input,
        target,
        task_id: spec.task_id,
    }
}

/// `spec.examples_count` examples, fully determined by `spec`.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(Dataset {
        examples: (0..spec.examples_count).map(|_| draw_example(spec, &mut rng)).collect(),
        split: Split::Train,
    })
}

/// `count` examples; each picks task `i` with probability `weights[i]` and
/// is drawn from that task's own stream, so a single spec reproduces
/// [`generate_task`].
pub fn generate_mixture(specs: &[SyntheticTaskSpec], weights: &[f64], count: usize, seed: u64) -> Result<Dataset> {
    if specs.is_empty() || specs.len() != weights.len() {
        return Err(Error::Contract(format!(
            "mixture of {} specs with {} weights",
            specs.len(),
            weights.len()
        )));
    }
    check_simplex(weights, "mixture weights")?;
    for s in specs {
        s.validate()?;
    }
    check_disjoint(specs)?;
    let mut chooser = ChaCha8Rng::seed_from_u64(seed);
    let mut streams: Vec<ChaCha8Rng> = specs.iter().map(|s| ChaCha8Rng::seed_from_u64(s.seed)).collect();
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let i = if specs.len() == 1 {
            0
        } else {
            pick(weights, chooser.gen::<f64>())
        };
        examples.push(draw_example(&specs[i], &mut streams[i]));
    }
    Ok(Dataset {
        examples,
        split: Split::Train,
    })
}

/// Uniform mixture over the standard-layout tasks `task_ids`; each task's
/// stream is seeded from `seed` and its id.
pub fn standard_mixture(cfg: &ModelConfig, task_ids: &[usize], count: usize, seed: u64) -> Result<Dataset> {
    let specs = task_ids
        .iter()
        .map(|&t| SyntheticTaskSpec::standard(cfg, t, 0, seed.wrapping_mul(1_000_003).wrapping_add(t as u64)))
        .collect::<Result<Vec<_>>>()?;
    let w = vec![1.0 / specs.len().max(1) as f64; specs.len()];
    generate_mixture(&specs, &w, count, seed)
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` a hair below 1; fall back to the last
    // non-zero weight.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Identity-copy examples over every non-pad token.
pub fn neutral_task(cfg: &ModelConfig, count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..count)
        .map(|_| {
            let len = rng.gen_range((cfg.max_seq_len / 2).max(1)..=cfg.max_seq_len);
            let input: Vec<usize> = (0..len).map(|_| rng.gen_range(1..cfg.vocab_size)).collect();
            Example {
                target: input.clone(),
                input,
                task_id: NEUTRAL_TASK_ID,
            }
        })
        .collect();
    Dataset {
        examples,
        split: Split::Train,
    }
}

/// Optimizer settings for base pretraining and expert training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub examples: usize,
}

impl FitConfig {
    pub fn pretrain_default() -> Self {
        Self {
            steps: 150,
            learning_rate: 1e-2,
            batch_size: 8,
            clip_norm: 1.0,
            seed: 0,
            examples: 512,
        }
    }

    pub fn expert_default() -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-2,
            batch_size: 8,
            clip_norm: 1.0,
            seed: 0,
            examples: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.examples == 0 {
            return Err(Error::Config("batch_size and examples must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        Self::expert_default()
    }
}

fn adam() -> OptimizerKind {
    OptimizerKind::default()
}

/// Mean per-example cross-entropy of a batch through `forward`.
fn fit_batch_loss<F>(tape: &mut Tape, data: &Dataset, batch: &[usize], mut forward: F) -> Result<Var>
where
    F: FnMut(&mut Tape, &[usize]) -> Result<Var>,
{
    let mut acc: Option<Var> = None;
    for &i in batch {
        let ex = &data.examples[i];
        let logits = forward(tape, &ex.input)?;
        let targets = masked_targets(&ex.target, tape.value(logits).rows())?;
        let ce = tape.cross_entropy(logits, &targets, 0.0)?;
        acc = Some(match acc {
            None => ce,
            Some(a) => tape.add(a, ce)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::Input("empty batch".into()))?;
    tape.scale(acc, 1.0 / batch.len() as f64)
}

fn divergence(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Divergence { step, loss: f64::NAN },
        other => other,
    }
}

/// Seeded Gaussian init followed by a short full-parameter fit on the
/// neutral copy task.
pub fn pretrain_base(config: ModelConfig, fit: &FitConfig) -> Result<BaseWeights> {
    fit.validate()?;
    let mut weights = BaseWeights::init(config)?;
    if fit.steps == 0 {
        return Ok(weights);
    }
    let data = neutral_task(&config, fit.examples, fit.seed ^ config.seed);
    let sizes: Vec<usize> = weights.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut opt = Optimizer::new(adam(), fit.learning_rate, &sizes);
    for step in 1..=fit.steps {
        let mut rng = step_rng(fit.seed, step);
        let batch = sample_batch(&mut rng, data.len(), fit.batch_size);
        let mut tape = Tape::new();
        let vars = weights.register(&mut tape, true)?;
        let loss = fit_batch_loss(&mut tape, &data, &batch, |t, tok| base_forward(t, &vars, &config, tok))
            .map_err(divergence(step))?;
        let grads = tape.backward(loss).map_err(divergence(step))?;
        let mut flat: Vec<Vec<f64>> = vars.all().iter().map(|v| grads.wrt(*v).data().to_vec()).collect();
        let norm = clip_global_norm(&mut flat, fit.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Divergence { step, loss: tape.value(loss).item() });
        }
        let mut named = weights.named_tensors_mut();
        let mut bufs: Vec<&mut [f64]> = named.iter_mut().map(|(_, t)| t.data_mut()).collect();
        opt.step(&mut bufs, &flat);
    }
    Ok(weights)
}

/// Trains a fresh rank-`rank` adapter on `spec` with the base frozen and
/// returns it with its token accuracy on a held-out draw of the same task.
pub fn train_expert_lora(base: &BaseWeights, spec: &SyntheticTaskSpec, rank: usize, fit: &FitConfig) -> Result<(LoraAdapter, f64)> {
    fit.validate()?;
    let cfg = base.config;
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed ^ (spec.task_id as u64).wrapping_mul(0x9E37_79B9));
    let mut adapter = LoraAdapter::init(&cfg, rank, DEFAULT_SCALING, format!("task{}", spec.task_id), Some(spec.task_id), &mut rng)?;
    let train = generate_task(&SyntheticTaskSpec {
        examples_count: fit.examples,
        ..spec.clone()
    })?;
    let sizes: Vec<usize> = adapter.matrices.values().flat_map(|m| [m.a.len(), m.b.len()]).collect();
    let mut opt = Optimizer::new(adam(), fit.learning_rate, &sizes);
    for step in 1..=fit.steps {
        let mut srng = step_rng(fit.seed, step);
        let batch = sample_batch(&mut srng, train.len(), fit.batch_size);
        let mut tape = Tape::new();
        let base_vars = base.register(&mut tape, false)?;
        let av = register_trainable_expert(&mut tape, &base_vars, &adapter)?;
        let vars = WeightVars {
            blocks: av.blocks.clone(),
            ..base_vars.clone()
        };
        let loss = fit_batch_loss(&mut tape, &train, &batch, |t, tok| base_forward(t, &vars, &cfg, tok))
            .map_err(divergence(step))?;
        let grads = tape.backward(loss).map_err(divergence(step))?;
        let mut flat: Vec<Vec<f64>> = av.params().iter().map(|v| grads.wrt(*v).data().to_vec()).collect();
        let norm = clip_global_norm(&mut flat, fit.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Divergence { step, loss: tape.value(loss).item() });
        }
        let mut bufs: Vec<&mut [f64]> = adapter
            .matrices
            .values_mut()
            .flat_map(|m| [m.a.data_mut(), m.b.data_mut()])
            .collect();
        opt.step(&mut bufs, &flat);
    }
    let held_out = generate_task(&SyntheticTaskSpec {
        seed: spec.seed.wrapping_add(0x5EED),
        examples_count: 128,
        ..spec.clone()
    })?
    .with_split(Split::Eval);
    let accuracy = adapter_accuracy(base, &adapter, &held_out)?;
    Ok((adapter, accuracy))
}

/// Token accuracy of `base` with `adapter` merged in.
pub fn adapter_accuracy(base: &BaseWeights, adapter: &LoraAdapter, data: &Dataset) -> Result<f64> {
    let set = ExpertSet::new(vec![adapter.clone()], &base.config)?;
    Ok(evaluate(base, Some(&set), &CompositionPlan::direct_merge(), data)?.accuracy)
}

/// Token accuracy of the bare base model.
pub fn base_accuracy(base: &BaseWeights, data: &Dataset) -> Result<f64> {
    Ok(evaluate(base, None, &CompositionPlan::base_only(), data)?.accuracy)
}

/// Checks every token of `data` fits in a model vocabulary.
pub fn check_vocab(data: &Dataset, vocab_size: usize) -> Result<()> {
    match data.max_token() {
        Some(m) if m >= vocab_size => Err(Error::Input(format!("dataset token {m} outside vocab of {vocab_size}"))),
        _ => Ok(()),
    }
}

impl SyntheticTaskSpec {
    /// Whether every token this spec can emit fits in `vocab_size`.
    pub fn fits_vocab(&self, vocab_size: usize) -> bool {
        self.max_token() <= vocab_size
    }
}
