//! TOML run configuration. Every section is optional and falls back to
//! defaults; unknown keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compose::CompositionPlan;
use crate::error::{Error, Result};
use crate::gating::{ExpertMask, Granularity, MixRule};
use crate::lora::MergeWeights;
use crate::model::{BaseWeights, ModelConfig};
use crate::tasks::FitConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    BaseOnly,
    Direct,
    Nla,
    Mole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub mode: PlanMode,
    pub granularity: Granularity,
    pub mix: MixRule,
    /// Merge weights for `nla`; uniform when absent.
    pub weights: Option<Vec<f64>>,
    /// Keep-mask applied at inference, one flag per expert.
    pub mask: Option<Vec<bool>>,
    /// Freezes τ at this value instead of learning it.
    pub fixed_temperature: Option<f64>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            mode: PlanMode::Mole,
            granularity: Granularity::Block,
            mix: MixRule::Literal,
            weights: None,
            mask: None,
            fixed_temperature: None,
        }
    }
}

impl PlanConfig {
    pub fn build(&self, base: &BaseWeights, n_experts: usize, seed: u64) -> Result<CompositionPlan> {
        let plan = match self.mode {
            PlanMode::BaseOnly => CompositionPlan::base_only(),
            PlanMode::Direct => CompositionPlan::direct_merge(),
            PlanMode::Nla => CompositionPlan::normalized_merge(match &self.weights {
                Some(w) => MergeWeights::new(w.clone())?,
                None => MergeWeights::uniform(n_experts),
            }),
            PlanMode::Mole => {
                let plan = CompositionPlan::mole(base, n_experts, self.granularity, seed)?.with_mix(self.mix);
                match self.fixed_temperature {
                    Some(t) => plan.with_fixed_temperature(t)?,
                    None => plan,
                }
            }
        };
        let mask = self.mask.clone().map(ExpertMask::new).transpose()?;
        Ok(plan.with_mask(mask))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    pub rank: usize,
    pub fit: FitConfig,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            fit: FitConfig::expert_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_tasks: usize,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_tasks: 3,
            train_examples: 512,
            eval_examples: 192,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: FitConfig,
    pub expert: ExpertConfig,
    pub train: TrainConfig,
    pub plan: PlanConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: FitConfig::pretrain_default(),
            expert: ExpertConfig::default(),
            train: TrainConfig::default(),
            plan: PlanConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.expert.fit.validate()?;
        self.train.validate()?;
        if self.plan.mode == PlanMode::Mole && self.plan.granularity != self.train.granularity {
            return Err(Error::Config(format!(
                "plan granularity {} differs from train granularity {}",
                self.plan.granularity, self.train.granularity
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_text() {
        let text = RunConfig::default().to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg = RunConfig::from_toml("[train]\nalpha = 0.0\nsteps = 5\ngranularity = \"layer\"\n[plan]\ngranularity = \"layer\"\nmix = \"delta-mix\"\n")
            .unwrap();
        assert_eq!(cfg.train.alpha, 0.0);
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.plan.mix, MixRule::DeltaMix);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "[train]\nalpah = 0.5\n",
            "[model]\nd_model = 32\nwidth = 3\n",
            "[bogus]\nx = 1\n",
            "top = 1\n",
            "[expert]\nrnak = 2\n",
            "[train.optimizer]\nkind = \"adam\"\nbeta1 = 0.9\nbeta2 = 0.999\neps = 1e-8\nmomentum = 1\n",
        ] {
            assert_eq!(RunConfig::from_toml(text).unwrap_err().kind(), "config", "accepted {text:?}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[train]\nalpha = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\ngranularity = \"sideways\"\n").is_err());
        assert!(RunConfig::from_toml("[model]\nn_heads = 5\n").is_err());
    }
}
