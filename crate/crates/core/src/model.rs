//! Frozen miniature pre-norm transformer.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token id reserved for right padding.
pub const PAD: usize = 0;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_blocks: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_blocks: 4,
            max_seq_len: 16,
            vocab_size: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_blocks", self.n_blocks),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must leave room for the pad token".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// The weight matrices of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixRole {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
}

impl MatrixRole {
    pub const ALL: [MatrixRole; 6] = [
        MatrixRole::Query,
        MatrixRole::Key,
        MatrixRole::Value,
        MatrixRole::Output,
        MatrixRole::FfnUp,
        MatrixRole::FfnDown,
    ];

    /// Matrices that LoRA adapters attach to.
    pub const LORA_TARGETS: [MatrixRole; 4] = [
        MatrixRole::Query,
        MatrixRole::Value,
        MatrixRole::FfnUp,
        MatrixRole::FfnDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MatrixRole::Query => "q",
            MatrixRole::Key => "k",
            MatrixRole::Value => "v",
            MatrixRole::Output => "o",
            MatrixRole::FfnUp => "ffn_up",
            MatrixRole::FfnDown => "ffn_down",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name)
    }

    /// (out, in) extents.
    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            MatrixRole::FfnUp => (cfg.d_ff, cfg.d_model),
            MatrixRole::FfnDown => (cfg.d_model, cfg.d_ff),
            _ => (cfg.d_model, cfg.d_model),
        }
    }

    pub fn sublayer(self) -> Sublayer {
        match self {
            MatrixRole::FfnUp | MatrixRole::FfnDown => Sublayer::Ffn,
            _ => Sublayer::Attention,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for MatrixRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sublayer {
    Attention,
    Ffn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// Indexed by [`MatrixRole::index`].
    pub matrices: [Tensor; 6],
}

impl BlockWeights {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let matrices = MatrixRole::ALL.map(|role| {
            let (o, i) = role.shape(cfg);
            Tensor::randn(&[o, i], INIT_STD, rng)
        });
        Self {
            ln1_gain: Tensor::ones(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::ones(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            matrices,
        }
    }

    pub fn matrix(&self, role: MatrixRole) -> &Tensor {
        &self.matrices[role.index()]
    }

    pub fn matrix_mut(&mut self, role: MatrixRole) -> &mut Tensor {
        &mut self.matrices[role.index()]
    }
}

/// Parameters of the frozen transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub head: Tensor,
}

impl BaseWeights {
    /// Gaussian initialization seeded from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, l) = (config.vocab_size, config.d_model, config.max_seq_len);
        let token_embedding = Tensor::randn(&[v, d], INIT_STD, &mut rng);
        let position_embedding = Tensor::randn(&[l, d], INIT_STD, &mut rng);
        let blocks = (0..config.n_blocks).map(|_| BlockWeights::init(&config, &mut rng)).collect();
        let head = Tensor::randn(&[v, d], INIT_STD, &mut rng);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_gain: Tensor::ones(&[d]),
            final_bias: Tensor::zeros(&[d]),
            head,
        })
    }

    /// Every tensor under a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (k, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{k}.ln1_gain"), &b.ln1_gain));
            out.push((format!("blocks.{k}.ln1_bias"), &b.ln1_bias));
            out.push((format!("blocks.{k}.ln2_gain"), &b.ln2_gain));
            out.push((format!("blocks.{k}.ln2_bias"), &b.ln2_bias));
            for role in MatrixRole::ALL {
                out.push((format!("blocks.{k}.{}", role.name()), b.matrix(role)));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("position_embedding".to_string(), &mut self.position_embedding),
        ];
        for (k, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{k}.ln1_gain"), &mut b.ln1_gain));
            out.push((format!("blocks.{k}.ln1_bias"), &mut b.ln1_bias));
            out.push((format!("blocks.{k}.ln2_gain"), &mut b.ln2_gain));
            out.push((format!("blocks.{k}.ln2_bias"), &mut b.ln2_bias));
            for (role, m) in MatrixRole::ALL.into_iter().zip(b.matrices.iter_mut()) {
                out.push((format!("blocks.{k}.{}", role.name()), m));
            }
        }
        out.push(("final_gain".to_string(), &mut self.final_gain));
        out.push(("final_bias".to_string(), &mut self.final_bias));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    /// Rebuilds weights from named tensors, checking every shape.
    pub fn from_named(config: ModelConfig, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let mut weights = Self::init(config)?;
        for (name, slot) in weights.named_tensors_mut() {
            let t = lookup(&name).ok_or_else(|| Error::format(&name, "tensor missing"))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    &name,
                    format!("shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok(weights)
    }

    /// SHA-256 over every tensor's shape and bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update(t.le_bytes().collect::<Vec<u8>>());
        }
        hex::encode(h.finalize())
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<WeightVars> {
        let mut put = |t: &Tensor| tape.leaf(t.clone().with_requires_grad(trainable));
        let token_embedding = put(&self.token_embedding)?;
        let position_embedding = put(&self.position_embedding)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let ln1_gain = put(&b.ln1_gain)?;
            let ln1_bias = put(&b.ln1_bias)?;
            let ln2_gain = put(&b.ln2_gain)?;
            let ln2_bias = put(&b.ln2_bias)?;
            let mut mats = Vec::with_capacity(6);
            for m in &b.matrices {
                mats.push(put(m)?);
            }
            blocks.push(BlockVars {
                ln1_gain,
                ln1_bias,
                ln2_gain,
                ln2_bias,
                matrices: mats.try_into().expect("six matrices"),
            });
        }
        Ok(WeightVars {
            token_embedding,
            position_embedding,
            blocks,
            final_gain: put(&self.final_gain)?,
            final_bias: put(&self.final_bias)?,
            head: put(&self.head)?,
        })
    }
}

/// Tape handles for one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub matrices: [Var; 6],
}

impl BlockVars {
    pub fn matrix(&self, role: MatrixRole) -> Var {
        self.matrices[role.index()]
    }

    pub fn with_matrix(mut self, role: MatrixRole, v: Var) -> Self {
        self.matrices[role.index()] = v;
        self
    }

    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias];
        v.extend_from_slice(&self.matrices);
        v
    }
}

/// Tape handles for a full weight set.
#[derive(Debug, Clone)]
pub struct WeightVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub blocks: Vec<BlockVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub head: Var,
}

impl WeightVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.token_embedding, self.position_embedding];
        for b in &self.blocks {
            v.extend(b.all());
        }
        v.extend([self.final_gain, self.final_bias, self.head]);
        v
    }
}

/// Right-pads `tokens` to `cfg.max_seq_len` after range-checking them.
pub fn pad_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<Vec<usize>> {
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence of length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Input(format!("token {t} out of range for vocab {}", cfg.vocab_size)));
    }
    let mut out = tokens.to_vec();
    out.resize(cfg.max_seq_len, PAD);
    Ok(out)
}

/// `x + Attn(LN(x))`, with every projection routed through `project`.
pub fn attention_sublayer<P>(tape: &mut Tape, x: Var, block: &BlockVars, n_heads: usize, mut project: P) -> Result<Var>
where
    P: FnMut(&mut Tape, MatrixRole, Var) -> Result<Var>,
{
    let h = tape.layer_norm(x, block.ln1_gain, block.ln1_bias, LAYER_NORM_EPS)?;
    let q = project(tape, MatrixRole::Query, h)?;
    let k = project(tape, MatrixRole::Key, h)?;
    let v = project(tape, MatrixRole::Value, h)?;
    let d = tape.value(q).cols();
    let dh = d / n_heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let (lo, hi) = (head * dh, (head + 1) * dh);
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, lo, hi)?, tape.slice_cols(k, lo, hi)?, tape.slice_cols(v, lo, hi)?)
        };
        let scores = tape.linear(qh, kh)?;
        let scores = tape.scale(scores, inv_sqrt)?;
        let attn = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let joined = if n_heads == 1 { heads[0] } else { tape.concat(&heads, 1)? };
    let out = project(tape, MatrixRole::Output, joined)?;
    tape.add(x, out)
}

/// `x + FFN(LN(x))` with a GELU hidden layer.
pub fn ffn_sublayer<P>(tape: &mut Tape, x: Var, block: &BlockVars, mut project: P) -> Result<Var>
where
    P: FnMut(&mut Tape, MatrixRole, Var) -> Result<Var>,
{
    let h = tape.layer_norm(x, block.ln2_gain, block.ln2_bias, LAYER_NORM_EPS)?;
    let up = project(tape, MatrixRole::FfnUp, h)?;
    let act = tape.gelu(up)?;
    let down = project(tape, MatrixRole::FfnDown, act)?;
    tape.add(x, down)
}

/// Plain projection through the block's own matrices.
pub fn plain(block: &BlockVars) -> impl FnMut(&mut Tape, MatrixRole, Var) -> Result<Var> + '_ {
    move |tape, role, h| tape.linear(h, block.matrix(role))
}

pub fn attention_forward(tape: &mut Tape, x: Var, block: &BlockVars, n_heads: usize) -> Result<Var> {
    attention_sublayer(tape, x, block, n_heads, plain(block))
}

pub fn ffn_forward(tape: &mut Tape, x: Var, block: &BlockVars) -> Result<Var> {
    ffn_sublayer(tape, x, block, plain(block))
}

fn check_activation(tape: &Tape, x: Var, block: &BlockVars) -> Result<()> {
    let d = tape.value(block.ln1_gain).len();
    let xs = tape.value(x).shape();
    if xs.len() != 2 || xs[1] != d {
        return Err(Error::dim("block_forward", format!("activation {xs:?} for width {d}")));
    }
    Ok(())
}

/// Pre-norm residual block: `x' = x + Attn(LN(x))`, `F = x' + FFN(LN(x'))`.
pub fn base_block_forward(tape: &mut Tape, x: Var, block: &BlockVars, n_heads: usize) -> Result<Var> {
    check_activation(tape, x, block)?;
    let mid = attention_forward(tape, x, block, n_heads)?;
    ffn_forward(tape, mid, block)
}

/// Token plus position embeddings for an already padded sequence.
pub fn embed(tape: &mut Tape, vars: &WeightVars, cfg: &ModelConfig, tokens: &[usize]) -> Result<Var> {
    let padded = pad_tokens(cfg, tokens)?;
    let tok = tape.gather_rows(vars.token_embedding, &padded)?;
    tape.add(tok, vars.position_embedding)
}

/// Final layer norm and vocabulary projection.
pub fn head_forward(tape: &mut Tape, vars: &WeightVars, x: Var) -> Result<Var> {
    let h = tape.layer_norm(x, vars.final_gain, vars.final_bias, LAYER_NORM_EPS)?;
    tape.linear(h, vars.head)
}

/// Logits of the unmodified base model.
pub fn base_forward(tape: &mut Tape, vars: &WeightVars, cfg: &ModelConfig, tokens: &[usize]) -> Result<Var> {
    let mut x = embed(tape, vars, cfg, tokens)?;
    for block in &vars.blocks {
        x = base_block_forward(tape, x, block, cfg.n_heads)?;
    }
    head_forward(tape, vars, x)
}

/// Convenience: base logits as a plain tensor.
pub fn base_logits(weights: &BaseWeights, tokens: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = weights.register(&mut tape, false)?;
    let out = base_forward(&mut tape, &vars, &weights.config, tokens)?;
    Ok(tape.value(out).clone())
}
