//! Composition plans and the composed forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gating::{
    combine_on_tape, distribution_of, enumerate_attach_points, gate_on_tape, AttachPoint, ExpertMask,
    GateDistribution, GateVars, GatingUnit, Granularity, MixRule, Temperature,
};
use crate::lora::{merge_direct, merge_normalized, register_expert, ExpertSet, MergeWeights};
use crate::model::{
    attention_forward, attention_sublayer, base_block_forward, embed, ffn_forward, ffn_sublayer, head_forward,
    BaseWeights, BlockVars, MatrixRole, Sublayer, WeightVars,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum CompositionMode {
    BaseOnly,
    DirectMerge,
    NormalizedMerge(MergeWeights),
    Mole,
}

impl CompositionMode {
    pub fn name(&self) -> &'static str {
        match self {
            CompositionMode::BaseOnly => "base-only",
            CompositionMode::DirectMerge => "direct-merge",
            CompositionMode::NormalizedMerge(_) => "normalized-merge",
            CompositionMode::Mole => "mole",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionPlan {
    pub mode: CompositionMode,
    pub granularity: Granularity,
    /// One unit per attach point, in [`enumerate_attach_points`] order.
    pub units: Vec<GatingUnit>,
    pub mask: Option<ExpertMask>,
    pub mix: MixRule,
}

impl CompositionPlan {
    pub fn base_only() -> Self {
        Self::merge(CompositionMode::BaseOnly)
    }

    pub fn direct_merge() -> Self {
        Self::merge(CompositionMode::DirectMerge)
    }

    pub fn normalized_merge(w: MergeWeights) -> Self {
        Self::merge(CompositionMode::NormalizedMerge(w))
    }

    fn merge(mode: CompositionMode) -> Self {
        Self {
            mode,
            granularity: Granularity::Block,
            units: Vec::new(),
            mask: None,
            mix: MixRule::Literal,
        }
    }

    /// Fresh gating units for every attach point of `granularity`.
    pub fn mole(base: &BaseWeights, n_experts: usize, granularity: Granularity, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let units = enumerate_attach_points(&base.config, granularity)
            .into_iter()
            .map(|p| GatingUnit::init(p, &base.config, n_experts, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode: CompositionMode::Mole,
            granularity,
            units,
            mask: None,
            mix: MixRule::Literal,
        })
    }

    pub fn with_mask(mut self, mask: Option<ExpertMask>) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_mix(mut self, mix: MixRule) -> Self {
        self.mix = mix;
        self
    }

    /// Pins every unit's temperature to `tau`.
    pub fn with_fixed_temperature(mut self, tau: f64) -> Result<Self> {
        let t = Temperature::fixed(tau)?;
        for u in &mut self.units {
            u.temperature = t;
        }
        Ok(self)
    }

    pub fn validate(&self, base: &BaseWeights, n_experts: usize) -> Result<()> {
        if self.mode != CompositionMode::Mole {
            return Ok(());
        }
        let expected = enumerate_attach_points(&base.config, self.granularity);
        if expected.len() != self.units.len() {
            return Err(Error::Contract(format!(
                "{} granularity needs {} gating units, plan has {}",
                self.granularity,
                expected.len(),
                self.units.len()
            )));
        }
        for (p, u) in expected.iter().zip(&self.units) {
            if *p != u.attach_point {
                return Err(Error::Contract(format!(
                    "gating unit at {} where {p} was expected",
                    u.attach_point
                )));
            }
            let xi = n_experts * base.config.max_seq_len * p.width(&base.config);
            if u.e.shape() != [xi, n_experts] {
                return Err(Error::dim(
                    "gating unit",
                    format!("{p}: e is {:?}, expected [{xi}, {n_experts}]", u.e.shape()),
                ));
            }
        }
        if let Some(m) = &self.mask {
            if m.len() != n_experts {
                return Err(Error::Contract(format!("mask of {} for {n_experts} experts", m.len())));
            }
        }
        Ok(())
    }

    pub fn n_attach_points(&self) -> usize {
        self.units.len()
    }
}

/// Output of one composed forward.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Gate distribution per attach point, in plan order.
    pub gates: Vec<Var>,
}

/// All weights of a composition registered on one tape; reused across the
/// examples of a batch.
pub struct Composition<'a> {
    base: &'a BaseWeights,
    plan: &'a CompositionPlan,
    vars: WeightVars,
    experts: Vec<Vec<BlockVars>>,
    gates: Vec<GateVars>,
}

impl<'a> Composition<'a> {
    /// Registers everything as constants, except the gating parameters when
    /// `train_gates` is set.
    pub fn register(
        tape: &mut Tape,
        base: &'a BaseWeights,
        experts: Option<&ExpertSet>,
        plan: &'a CompositionPlan,
        train_gates: bool,
    ) -> Result<Self> {
        let need_experts = || {
            experts.ok_or_else(|| Error::Contract(format!("{} composition needs experts", plan.mode.name())))
        };
        let (vars, expert_vars, gates) = match &plan.mode {
            CompositionMode::BaseOnly => (base.register(tape, false)?, vec![], vec![]),
            CompositionMode::DirectMerge => {
                let merged = merge_direct(base, need_experts()?)?;
                (merged.register(tape, false)?, vec![], vec![])
            }
            CompositionMode::NormalizedMerge(w) => {
                let merged = merge_normalized(base, need_experts()?, w)?;
                (merged.register(tape, false)?, vec![], vec![])
            }
            CompositionMode::Mole => {
                let experts = need_experts()?;
                plan.validate(base, experts.len())?;
                let vars = base.register(tape, false)?;
                let ev = experts
                    .adapters()
                    .iter()
                    .map(|a| register_expert(tape, base, &vars, a))
                    .collect::<Result<Vec<_>>>()?;
                let gates = plan
                    .units
                    .iter()
                    .map(|u| GateVars::register(tape, u, train_gates))
                    .collect::<Result<Vec<_>>>()?;
                (vars, ev, gates)
            }
        };
        Ok(Self {
            base,
            plan,
            vars,
            experts: expert_vars,
            gates,
        })
    }

    pub fn base_vars(&self) -> &WeightVars {
        &self.vars
    }

    pub fn expert_vars(&self) -> &[Vec<BlockVars>] {
        &self.experts
    }

    pub fn gate_vars(&self) -> &[GateVars] {
        &self.gates
    }

    pub fn forward(&self, tape: &mut Tape, tokens: &[usize]) -> Result<ForwardOutput> {
        let cfg = &self.base.config;
        let mut x = embed(tape, &self.vars, cfg, tokens)?;
        let mut gates = Vec::new();
        if self.plan.mode != CompositionMode::Mole {
            for b in &self.vars.blocks {
                x = base_block_forward(tape, x, b, cfg.n_heads)?;
            }
            let logits = head_forward(tape, &self.vars, x)?;
            return Ok(ForwardOutput { logits, gates });
        }
        let mask = self.plan.mask.as_ref();
        let rule = self.plan.mix;
        let n_heads = cfg.n_heads;
        match self.plan.granularity {
            Granularity::Network => {
                let mut frozen = x;
                for b in &self.vars.blocks {
                    frozen = base_block_forward(tape, frozen, b, n_heads)?;
                }
                let mut outs = Vec::with_capacity(self.experts.len());
                for blocks in &self.experts {
                    let mut e = x;
                    for b in blocks {
                        e = base_block_forward(tape, e, b, n_heads)?;
                    }
                    outs.push(e);
                }
                let g = gate_on_tape(tape, &self.gates[0], &outs, mask)?;
                gates.push(g);
                x = combine_on_tape(tape, frozen, &outs, g, rule)?;
            }
            Granularity::Block => {
                for (k, b) in self.vars.blocks.iter().enumerate() {
                    let frozen = base_block_forward(tape, x, b, n_heads)?;
                    let outs = self
                        .experts
                        .iter()
                        .map(|ex| base_block_forward(tape, x, &ex[k], n_heads))
                        .collect::<Result<Vec<_>>>()?;
                    let g = gate_on_tape(tape, &self.gates[k], &outs, mask)?;
                    gates.push(g);
                    x = combine_on_tape(tape, frozen, &outs, g, rule)?;
                }
            }
            Granularity::Layer => {
                for (k, b) in self.vars.blocks.iter().enumerate() {
                    for (j, sub) in [Sublayer::Attention, Sublayer::Ffn].into_iter().enumerate() {
                        let run = |tape: &mut Tape, x: Var, bv: &BlockVars| match sub {
                            Sublayer::Attention => attention_forward(tape, x, bv, n_heads),
                            Sublayer::Ffn => ffn_forward(tape, x, bv),
                        };
                        let frozen = run(tape, x, b)?;
                        let outs = self
                            .experts
                            .iter()
                            .map(|ex| run(tape, x, &ex[k]))
                            .collect::<Result<Vec<_>>>()?;
                        let g = gate_on_tape(tape, &self.gates[2 * k + j], &outs, mask)?;
                        gates.push(g);
                        x = combine_on_tape(tape, frozen, &outs, g, rule)?;
                    }
                }
            }
            Granularity::Matrix => {
                let targets = MatrixRole::LORA_TARGETS;
                for (k, b) in self.vars.blocks.iter().enumerate() {
                    let experts = &self.experts;
                    let units = &self.gates[targets.len() * k..targets.len() * (k + 1)];
                    let mut project = |tape: &mut Tape, role: MatrixRole, h: Var| -> Result<Var> {
                        let frozen = tape.linear(h, b.matrix(role))?;
                        let Some(slot) = targets.iter().position(|r| *r == role) else {
                            return Ok(frozen);
                        };
                        let outs = experts
                            .iter()
                            .map(|ex| tape.linear(h, ex[k].matrix(role)))
                            .collect::<Result<Vec<_>>>()?;
                        let g = gate_on_tape(tape, &units[slot], &outs, mask)?;
                        gates.push(g);
                        combine_on_tape(tape, frozen, &outs, g, rule)
                    };
                    let mid = attention_sublayer(tape, x, b, n_heads, &mut project)?;
                    x = ffn_sublayer(tape, mid, b, &mut project)?;
                }
            }
        }
        let logits = head_forward(tape, &self.vars, x)?;
        Ok(ForwardOutput { logits, gates })
    }
}

/// Logits (L × vocab) and per-attach-point gate distributions for one sequence.
pub fn model_forward(
    tokens: &[usize],
    base: &BaseWeights,
    experts: Option<&ExpertSet>,
    plan: &CompositionPlan,
) -> Result<(Tensor, Vec<GateDistribution>)> {
    let mut tape = Tape::new();
    let comp = Composition::register(&mut tape, base, experts, plan, false)?;
    let out = comp.forward(&mut tape, tokens)?;
    let gates = out.gates.iter().map(|g| distribution_of(&tape, *g)).collect();
    Ok((tape.value(out.logits).clone(), gates))
}

/// One gated block on a given activation: `O = F_θ(x) + Σ Gᵢ·E_Δθᵢ(x)`.
pub fn mole_block_forward(
    x: &Tensor,
    base: &BaseWeights,
    block: usize,
    experts: &ExpertSet,
    unit: &GatingUnit,
    mask: Option<&ExpertMask>,
    rule: MixRule,
) -> Result<(Tensor, GateDistribution)> {
    if unit.granularity() != Granularity::Block {
        return Err(Error::Contract(format!(
            "mole_block_forward needs a block-granularity unit, got {}",
            unit.attach_point
        )));
    }
    if block >= base.blocks.len() {
        return Err(Error::Input(format!("block {block} out of range")));
    }
    let mut tape = Tape::new();
    let vars = base.register(&mut tape, false)?;
    let xv = tape.constant(x.clone())?;
    let frozen = base_block_forward(&mut tape, xv, &vars.blocks[block], base.config.n_heads)?;
    let mut outs = Vec::with_capacity(experts.len());
    for a in experts.adapters() {
        let ev = register_expert(&mut tape, base, &vars, a)?;
        outs.push(base_block_forward(&mut tape, xv, &ev[block], base.config.n_heads)?);
    }
    let gv = GateVars::register(&mut tape, unit, false)?;
    let g = gate_on_tape(&mut tape, &gv, &outs, mask)?;
    let o = combine_on_tape(&mut tape, frozen, &outs, g, rule)?;
    Ok((tape.value(o).clone(), distribution_of(&tape, g)))
}

/// Unit for block `k` checked against a plan.
pub fn unit_for<'p>(plan: &'p CompositionPlan, point: &AttachPoint) -> Option<&'p GatingUnit> {
    plan.units.iter().find(|u| u.attach_point == *point)
}
