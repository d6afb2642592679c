//! Typed artifacts stored in containers: base models, LoRA adapters, gated
//! compositions and gate-training checkpoints.
//!
//! The container metadata carries a `kind` tag plus everything needed to
//! rebuild the in-memory value; tensors are named after their role.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::Container;
use crate::compose::{CompositionMode, CompositionPlan};
use crate::error::{Error, Result};
use crate::gating::{AttachPoint, GatingUnit, Granularity, MixRule, Temperature};
use crate::lora::{ExpertSet, LoraAdapter, LoraMatrix, MatrixId};
use crate::model::{BaseWeights, ModelConfig};
use crate::training::{Checkpoint, Optimizer, OptimizerKind};

/// Tag recorded for the per-expert normalization applied before gating.
pub const NORM_TAG: &str = "rms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterMeta {
    name: String,
    task_id: Option<usize>,
    /// Scaling `s` per matrix id.
    scaling: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GateMeta {
    point: String,
    /// `learned` stores the raw pre-softplus value, `fixed` stores τ itself.
    temperature: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Meta {
    Base {
        model_config: ModelConfig,
        seed: u64,
        origin: String,
    },
    Adapter {
        model_config: ModelConfig,
        rank: usize,
        seed: u64,
        adapter: AdapterMeta,
    },
    Gated {
        model_config: ModelConfig,
        seed: u64,
        granularity: Granularity,
        mix: MixRule,
        norm: String,
        experts: Vec<AdapterMeta>,
        gates: Vec<GateMeta>,
    },
    Checkpoint {
        seed: u64,
        granularity: Granularity,
        mix: MixRule,
        gates: Vec<GateMeta>,
        step: usize,
        config_hash: String,
        optimizer: OptimizerKind,
        learning_rate: f64,
        optimizer_steps: u64,
    },
}

/// A base model, a composed set of experts with their gates, and the plan
/// used to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedModel {
    pub base: BaseWeights,
    pub experts: ExpertSet,
    pub plan: CompositionPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Base(BaseWeights),
    Adapter { config: ModelConfig, adapter: LoraAdapter },
    Gated(GatedModel),
    Checkpoint(Checkpoint),
}

impl Artifact {
    pub fn kind(&self) -> &'static str {
        match self {
            Artifact::Base(_) => "base",
            Artifact::Adapter { .. } => "adapter",
            Artifact::Gated(_) => "gated",
            Artifact::Checkpoint(_) => "checkpoint",
        }
    }

    /// `seed` is recorded as the creation seed; `origin` describes how a
    /// base model was produced (ignored for other kinds).
    pub fn to_container(&self, seed: u64, origin: &str) -> Result<Container> {
        let mut tensors = Container::default();
        let meta = match self {
            Artifact::Base(base) => {
                push_base(&mut tensors, "", base)?;
                Meta::Base {
                    model_config: base.config,
                    seed,
                    origin: origin.to_string(),
                }
            }
            Artifact::Adapter { config, adapter } => {
                let rank = adapter.matrices.values().next().map_or(0, LoraMatrix::rank);
                Meta::Adapter {
                    model_config: *config,
                    rank,
                    seed,
                    adapter: push_adapter(&mut tensors, "", adapter)?,
                }
            }
            Artifact::Gated(g) => {
                if g.plan.mode != CompositionMode::Mole {
                    return Err(Error::Contract(format!(
                        "only mole plans are stored as gated models, got {}",
                        g.plan.mode.name()
                    )));
                }
                push_base(&mut tensors, "base.", &g.base)?;
                let experts = g
                    .experts
                    .adapters()
                    .iter()
                    .enumerate()
                    .map(|(i, a)| push_adapter(&mut tensors, &format!("expert.{i}."), a))
                    .collect::<Result<Vec<_>>>()?;
                Meta::Gated {
                    model_config: g.base.config,
                    seed,
                    granularity: g.plan.granularity,
                    mix: g.plan.mix,
                    norm: NORM_TAG.into(),
                    experts,
                    gates: push_gates(&mut tensors, &g.plan.units)?,
                }
            }
            Artifact::Checkpoint(c) => {
                let gates = push_gates(&mut tensors, &c.plan.units)?;
                for (k, (m, v)) in c.optimizer.moments.iter().enumerate() {
                    tensors.push(format!("opt.{k}.m"), &crate::Tensor::vector(m)?)?;
                    tensors.push(format!("opt.{k}.v"), &crate::Tensor::vector(v)?)?;
                }
                Meta::Checkpoint {
                    seed,
                    granularity: c.plan.granularity,
                    mix: c.plan.mix,
                    gates,
                    step: c.step,
                    config_hash: c.config_hash.clone(),
                    optimizer: c.optimizer.kind,
                    learning_rate: c.optimizer.learning_rate,
                    optimizer_steps: c.optimizer.t,
                }
            }
        };
        tensors.metadata = serde_json::to_value(meta).map_err(|e| Error::format("metadata", e.to_string()))?;
        Ok(tensors)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: Meta =
            serde_json::from_value(c.metadata.clone()).map_err(|e| Error::format("metadata", e.to_string()))?;
        match meta {
            Meta::Base { model_config, .. } => Ok(Artifact::Base(read_base(c, "", model_config)?)),
            Meta::Adapter {
                model_config, adapter, ..
            } => {
                let adapter = read_adapter(c, "", &adapter)?;
                adapter.validate(&model_config)?;
                Ok(Artifact::Adapter {
                    config: model_config,
                    adapter,
                })
            }
            Meta::Gated {
                model_config,
                granularity,
                mix,
                norm,
                experts,
                gates,
                ..
            } => {
                if norm != NORM_TAG {
                    return Err(Error::format("metadata", format!("unsupported normalization '{norm}'")));
                }
                let base = read_base(c, "base.", model_config)?;
                let adapters = experts
                    .iter()
                    .enumerate()
                    .map(|(i, m)| read_adapter(c, &format!("expert.{i}."), m))
                    .collect::<Result<Vec<_>>>()?;
                let experts = ExpertSet::new(adapters, &model_config)?;
                let plan = CompositionPlan {
                    mode: CompositionMode::Mole,
                    granularity,
                    units: read_gates(c, &gates)?,
                    mask: None,
                    mix,
                };
                plan.validate(&base, experts.len())?;
                Ok(Artifact::Gated(GatedModel { base, experts, plan }))
            }
            Meta::Checkpoint {
                granularity,
                mix,
                gates,
                step,
                config_hash,
                optimizer,
                learning_rate,
                optimizer_steps,
                ..
            } => {
                let units = read_gates(c, &gates)?;
                let mut moments = Vec::new();
                if matches!(optimizer, OptimizerKind::Adam { .. }) {
                    for k in 0.. {
                        let (Some(m), Some(v)) = (c.get(&format!("opt.{k}.m")), c.get(&format!("opt.{k}.v"))) else {
                            break;
                        };
                        moments.push((m.into_data(), v.into_data()));
                    }
                }
                Ok(Artifact::Checkpoint(Checkpoint {
                    plan: CompositionPlan {
                        mode: CompositionMode::Mole,
                        granularity,
                        units,
                        mask: None,
                        mix,
                    },
                    optimizer: Optimizer {
                        kind: optimizer,
                        learning_rate,
                        moments,
                        t: optimizer_steps,
                    },
                    step,
                    config_hash,
                }))
            }
        }
    }

    pub fn save(&self, path: &Path, seed: u64, origin: &str) -> Result<()> {
        self.to_container(seed, origin)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn push_base(c: &mut Container, prefix: &str, base: &BaseWeights) -> Result<()> {
    for (name, t) in base.named_tensors() {
        c.push(format!("{prefix}{name}"), t)?;
    }
    Ok(())
}

fn read_base(c: &Container, prefix: &str, config: ModelConfig) -> Result<BaseWeights> {
    config.validate()?;
    BaseWeights::from_named(config, |name| c.get(&format!("{prefix}{name}")))
}

fn push_adapter(c: &mut Container, prefix: &str, a: &LoraAdapter) -> Result<AdapterMeta> {
    let mut scaling = BTreeMap::new();
    for (id, m) in &a.matrices {
        c.push(format!("{prefix}{id}.A"), &m.a)?;
        c.push(format!("{prefix}{id}.B"), &m.b)?;
        scaling.insert(id.to_string(), m.scaling);
    }
    Ok(AdapterMeta {
        name: a.name.clone(),
        task_id: a.task_id,
        scaling,
    })
}

fn read_adapter(c: &Container, prefix: &str, meta: &AdapterMeta) -> Result<LoraAdapter> {
    let mut matrices = BTreeMap::new();
    for (id, &s) in &meta.scaling {
        let mid = MatrixId::parse(id).ok_or_else(|| Error::format("metadata", format!("bad matrix id '{id}'")))?;
        let a = c.require(&format!("{prefix}{id}.A"))?;
        let b = c.require(&format!("{prefix}{id}.B"))?;
        let m = LoraMatrix::new(a, b, s).map_err(|e| Error::format(format!("{prefix}{id}"), e.to_string()))?;
        matrices.insert(mid, m);
    }
    Ok(LoraAdapter {
        name: meta.name.clone(),
        task_id: meta.task_id,
        matrices,
    })
}

fn push_gates(c: &mut Container, units: &[GatingUnit]) -> Result<Vec<GateMeta>> {
    units
        .iter()
        .map(|u| {
            let point = u.attach_point.to_string();
            let (kind, value) = match u.temperature {
                Temperature::Learned { raw } => ("learned", raw),
                Temperature::Fixed { tau } => ("fixed", tau),
            };
            c.push(format!("gate.{point}.e"), &u.e)?;
            c.push(format!("gate.{point}.tau"), &crate::Tensor::vector(&[value])?)?;
            Ok(GateMeta {
                point,
                temperature: kind.into(),
            })
        })
        .collect()
}

fn read_gates(c: &Container, gates: &[GateMeta]) -> Result<Vec<GatingUnit>> {
    gates
        .iter()
        .map(|g| {
            let attach_point = AttachPoint::parse(&g.point)
                .ok_or_else(|| Error::format("metadata", format!("bad attach point '{}'", g.point)))?;
            let e = c.require(&format!("gate.{}.e", g.point))?;
            let value = c.require(&format!("gate.{}.tau", g.point))?.data()[0];
            let temperature = match g.temperature.as_str() {
                "learned" => Temperature::Learned { raw: value },
                "fixed" => Temperature::Fixed { tau: value },
                other => return Err(Error::format("metadata", format!("bad temperature kind '{other}'"))),
            };
            Ok(GatingUnit {
                attach_point,
                e,
                temperature,
            })
        })
        .collect()
}

/// Anything that can run inference: a bare (possibly merged) base model or
/// a gated composition.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub base: BaseWeights,
    pub experts: Option<ExpertSet>,
    pub plan: CompositionPlan,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    match Artifact::load(path)? {
        Artifact::Base(base) => Ok(LoadedModel {
            base,
            experts: None,
            plan: CompositionPlan::base_only(),
        }),
        Artifact::Gated(g) => Ok(LoadedModel {
            base: g.base,
            experts: Some(g.experts),
            plan: g.plan,
        }),
        other => Err(Error::Input(format!(
            "'{}' holds a {} artifact, expected a base or gated model",
            path.display(),
            other.kind()
        ))),
    }
}

pub fn load_base(path: &Path) -> Result<BaseWeights> {
    match Artifact::load(path)? {
        Artifact::Base(b) => Ok(b),
        other => Err(Error::Input(format!(
            "'{}' holds a {} artifact, expected a base model",
            path.display(),
            other.kind()
        ))),
    }
}

pub fn load_adapter(path: &Path) -> Result<(ModelConfig, LoraAdapter)> {
    match Artifact::load(path)? {
        Artifact::Adapter { config, adapter } => Ok((config, adapter)),
        other => Err(Error::Input(format!(
            "'{}' holds a {} artifact, expected an adapter",
            path.display(),
            other.kind()
        ))),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    match Artifact::load(path)? {
        Artifact::Checkpoint(c) => Ok(c),
        other => Err(Error::Input(format!(
            "'{}' holds a {} artifact, expected a checkpoint",
            path.display(),
            other.kind()
        ))),
    }
}
