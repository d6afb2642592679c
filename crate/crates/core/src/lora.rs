//! Low-rank adapters: representation, weight-space merges, the per-expert
//! block forward, and depth-range slicing.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{base_block_forward, BaseWeights, BlockVars, BlockWeights, MatrixRole, ModelConfig, WeightVars};
use crate::tensor::Tensor;

/// Default per-matrix scaling `s` in `ΔW = s·B·A`.
pub const DEFAULT_SCALING: f64 = 1.0;

const SIMPLEX_TOL: f64 = 1e-9;

/// A weight matrix inside the base model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MatrixId {
    pub block: usize,
    pub role: MatrixRole,
}

impl MatrixId {
    pub fn new(block: usize, role: MatrixRole) -> Self {
        Self { block, role }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let rest = s.strip_prefix('b')?;
        let (block, role) = rest.split_once('.')?;
        Some(Self {
            block: block.parse().ok()?,
            role: MatrixRole::from_name(role)?,
        })
    }
}

impl fmt::Display for MatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}.{}", self.block, self.role)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraMatrix {
    /// r × d_in
    pub a: Tensor,
    /// d_out × r
    pub b: Tensor,
    pub scaling: f64,
}

impl LoraMatrix {
    pub fn new(a: Tensor, b: Tensor, scaling: f64) -> Result<Self> {
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::dim("lora", "factors must be matrices"));
        }
        if b.cols() != a.rows() {
            return Err(Error::dim(
                "lora",
                format!("B is {:?} but A is {:?}", b.shape(), a.shape()),
            ));
        }
        let r = a.rows();
        if r > a.cols().min(b.rows()) {
            return Err(Error::Contract(format!(
                "rank {r} exceeds min(d_in={}, d_out={})",
                a.cols(),
                b.rows()
            )));
        }
        if !scaling.is_finite() {
            return Err(Error::NonFinite { op: "lora scaling" });
        }
        Ok(Self { a, b, scaling })
    }

    /// Gaussian `A`, zero `B`: the delta starts at exactly zero.
    pub fn init<R: Rng + ?Sized>(d_out: usize, d_in: usize, rank: usize, scaling: f64, rng: &mut R) -> Result<Self> {
        let a = Tensor::randn(&[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng);
        Self::new(a, Tensor::zeros(&[d_out, rank]), scaling)
    }

    pub fn zeros(d_out: usize, d_in: usize, rank: usize, scaling: f64) -> Result<Self> {
        Self::new(Tensor::zeros(&[rank, d_in]), Tensor::zeros(&[d_out, rank]), scaling)
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    /// `s·B·A`, shape d_out × d_in.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?.scale(self.scaling))
    }

    fn zeroed(&self) -> Self {
        Self {
            a: Tensor::zeros(self.a.shape()),
            b: Tensor::zeros(self.b.shape()),
            scaling: self.scaling,
        }
    }
}

/// `ΔW = s·B·A` for one matrix.
pub fn delta(m: &LoraMatrix) -> Result<Tensor> {
    m.delta()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub name: String,
    pub task_id: Option<usize>,
    pub matrices: BTreeMap<MatrixId, LoraMatrix>,
}

impl LoraAdapter {
    /// Freshly initialized adapter on every LoRA target of every block.
    pub fn init<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        rank: usize,
        scaling: f64,
        name: impl Into<String>,
        task_id: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut matrices = BTreeMap::new();
        for block in 0..cfg.n_blocks {
            for role in MatrixRole::LORA_TARGETS {
                let (o, i) = role.shape(cfg);
                matrices.insert(MatrixId::new(block, role), LoraMatrix::init(o, i, rank, scaling, rng)?);
            }
        }
        Ok(Self {
            name: name.into(),
            task_id,
            matrices,
        })
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for (id, m) in &self.matrices {
            if id.block >= cfg.n_blocks {
                return Err(Error::Composition(format!(
                    "adapter '{}' targets {id} but the model has {} blocks",
                    self.name, cfg.n_blocks
                )));
            }
            if m.shape() != id.role.shape(cfg) {
                return Err(Error::Composition(format!(
                    "adapter '{}' matrix {id} is {:?}, base is {:?}",
                    self.name,
                    m.shape(),
                    id.role.shape(cfg)
                )));
            }
        }
        Ok(())
    }

    pub fn matrices_in_block(&self, block: usize) -> impl Iterator<Item = (&MatrixId, &LoraMatrix)> {
        self.matrices.iter().filter(move |(id, _)| id.block == block)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        for (id, m) in &self.matrices {
            h.update(id.to_string().as_bytes());
            h.update(m.a.le_bytes().collect::<Vec<u8>>());
            h.update(m.b.le_bytes().collect::<Vec<u8>>());
            h.update(m.scaling.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Ordered set of experts; gate index `i` refers to `adapters[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSet {
    adapters: Vec<LoraAdapter>,
}

impl ExpertSet {
    pub fn new(adapters: Vec<LoraAdapter>, cfg: &ModelConfig) -> Result<Self> {
        if adapters.is_empty() {
            return Err(Error::Contract("an expert set needs at least one adapter".into()));
        }
        for a in &adapters {
            a.validate(cfg)?;
        }
        Ok(Self { adapters })
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn get(&self, i: usize) -> &LoraAdapter {
        &self.adapters[i]
    }

    /// A one-element set holding expert `i`.
    pub fn single(&self, i: usize) -> Self {
        Self {
            adapters: vec![self.adapters[i].clone()],
        }
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.adapters {
            h.update(a.fingerprint().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Weights of a normalized merge; must lie on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeWeights(Vec<f64>);

impl MergeWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        check_simplex(&w, "merge weights")?;
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_simplex(w: &[f64], what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Contract(format!("{what} are empty")));
    }
    if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::Contract(format!("{what} must be finite and non-negative: {w:?}")));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Contract(format!("{what} sum to {total}, not 1")));
    }
    Ok(())
}

fn merge_with(base: &BaseWeights, experts: &ExpertSet, coef: &[f64]) -> Result<BaseWeights> {
    let mut merged = base.clone();
    for (adapter, &c) in experts.adapters.iter().zip(coef) {
        adapter.validate(&base.config)?;
        for (id, m) in &adapter.matrices {
            let d = m.delta()?;
            merged.blocks[id.block].matrix_mut(id.role).add_scaled_in_place(&d, c)?;
        }
    }
    Ok(merged)
}

/// `Ŵ = W + Σᵢ ΔWᵢ` on every targeted matrix.
pub fn merge_direct(base: &BaseWeights, experts: &ExpertSet) -> Result<BaseWeights> {
    merge_with(base, experts, &vec![1.0; experts.len()])
}

/// `Ŵ = W + Σᵢ wᵢ·ΔWᵢ` with `w` on the simplex.
pub fn merge_normalized(base: &BaseWeights, experts: &ExpertSet, w: &MergeWeights) -> Result<BaseWeights> {
    if w.0.len() != experts.len() {
        return Err(Error::Contract(format!(
            "{} merge weights for {} experts",
            w.0.len(),
            experts.len()
        )));
    }
    check_simplex(&w.0, "merge weights")?;
    merge_with(base, experts, &w.0)
}

/// Base block with the adapter's deltas folded into its targeted matrices.
pub fn effective_block(base: &BlockWeights, adapter: &LoraAdapter, block: usize) -> Result<BlockWeights> {
    let mut out = base.clone();
    for (id, m) in adapter.matrices_in_block(block) {
        let target = out.matrix_mut(id.role);
        if target.shape() != [m.shape().0, m.shape().1] {
            return Err(Error::dim(
                "expert_block_forward",
                format!("{id}: delta {:?} vs base {:?}", m.shape(), target.shape()),
            ));
        }
        target.add_scaled_in_place(&m.delta()?, 1.0)?;
    }
    Ok(out)
}

/// Registers the adapter's effective matrices (W + ΔW) as frozen constants,
/// sharing the base handles for everything the adapter does not touch.
pub fn register_expert(
    tape: &mut Tape,
    base: &BaseWeights,
    base_vars: &WeightVars,
    adapter: &LoraAdapter,
) -> Result<Vec<BlockVars>> {
    let mut blocks = base_vars.blocks.clone();
    for (k, vars) in blocks.iter_mut().enumerate() {
        let eff = effective_block(&base.blocks[k], adapter, k)?;
        for (id, _) in adapter.matrices_in_block(k) {
            let v = tape.constant(eff.matrix(id.role).clone())?;
            *vars = vars.with_matrix(id.role, v);
        }
    }
    Ok(blocks)
}

/// Trainable factors of one adapter on a tape.
#[derive(Debug, Clone)]
pub struct AdapterVars {
    pub factors: BTreeMap<MatrixId, (Var, Var)>,
    pub blocks: Vec<BlockVars>,
}

impl AdapterVars {
    pub fn params(&self) -> Vec<Var> {
        self.factors.values().flat_map(|(a, b)| [*a, *b]).collect()
    }
}

/// Registers the adapter with `A`, `B` as differentiable leaves and builds
/// `W + s·B·A` on the tape.
pub fn register_trainable_expert(tape: &mut Tape, base_vars: &WeightVars, adapter: &LoraAdapter) -> Result<AdapterVars> {
    let mut blocks = base_vars.blocks.clone();
    let mut factors = BTreeMap::new();
    for (id, m) in &adapter.matrices {
        let a = tape.param(m.a.clone())?;
        let b = tape.param(m.b.clone())?;
        let ba = tape.matmul(b, a)?;
        let d = tape.scale(ba, m.scaling)?;
        let w = tape.add(blocks[id.block].matrix(id.role), d)?;
        blocks[id.block] = blocks[id.block].with_matrix(id.role, w);
        factors.insert(*id, (a, b));
    }
    Ok(AdapterVars { factors, blocks })
}

/// `E_Δθ(x)`: the base block's residual structure with every targeted matrix
/// replaced by `W + ΔW`.
pub fn expert_block_forward(
    tape: &mut Tape,
    x: Var,
    block_base: &BlockWeights,
    adapter: &LoraAdapter,
    block: usize,
    n_heads: usize,
) -> Result<Var> {
    let eff = effective_block(block_base, adapter, block)?;
    let vars = register_block(tape, &eff)?;
    base_block_forward(tape, x, &vars, n_heads)
}

/// Registers a single block's weights as constants.
pub fn register_block(tape: &mut Tape, b: &BlockWeights) -> Result<BlockVars> {
    let mut mats = Vec::with_capacity(6);
    for m in &b.matrices {
        mats.push(tape.constant(m.clone())?);
    }
    Ok(BlockVars {
        ln1_gain: tape.constant(b.ln1_gain.clone())?,
        ln1_bias: tape.constant(b.ln1_bias.clone())?,
        ln2_gain: tape.constant(b.ln2_gain.clone())?,
        ln2_bias: tape.constant(b.ln2_bias.clone())?,
        matrices: mats.try_into().expect("six matrices"),
    })
}

/// Whether block `k` of `n_blocks` lies in the depth range `[from, to)` percent.
pub fn block_in_range(k: usize, n_blocks: usize, from_pct: f64, to_pct: f64) -> bool {
    let pos = 100.0 * k as f64 / n_blocks as f64;
    from_pct <= pos && pos < to_pct
}

/// Keeps only the adapter's matrices whose block depth lies in
/// `[from_pct, to_pct)`; the rest become zero matrices.
pub fn layer_range_mask(adapter: &LoraAdapter, n_blocks: usize, from_pct: f64, to_pct: f64) -> Result<LoraAdapter> {
    if !(0.0..=100.0).contains(&from_pct) || !(0.0..=100.0).contains(&to_pct) || from_pct >= to_pct {
        return Err(Error::Contract(format!(
            "layer range must satisfy 0 <= from < to <= 100, got {from_pct}:{to_pct}"
        )));
    }
    let matrices = adapter
        .matrices
        .iter()
        .map(|(id, m)| {
            let kept = if block_in_range(id.block, n_blocks, from_pct, to_pct) {
                m.clone()
            } else {
                m.zeroed()
            };
            (*id, kept)
        })
        .collect();
    Ok(LoraAdapter {
        name: format!("{}[{from_pct}:{to_pct}]", adapter.name),
        task_id: adapter.task_id,
        matrices,
    })
}
