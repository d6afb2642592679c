//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is always
//! topologically sorted and `backward` is a single reverse sweep. Only nodes
//! that transitively depend on a `requires_grad` leaf take part in the sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gelu_grad, sigmoid, Tensor, LOG_CLAMP, RMS_FLOOR};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var, f64),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Recip(Var),
    MatMul(Var, Var),
    Linear(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    RmsNormalize(Var),
    Concat(Vec<Var>, usize),
    Reshape(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    Index(Var, usize),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, smoothing: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MulScalar(..) => "mul_scalar",
            Op::DivScalar(..) => "div_scalar",
            Op::Recip(..) => "recip",
            Op::MatMul(..) => "matmul",
            Op::Linear(..) => "linear",
            Op::Transpose(..) => "transpose",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::RmsNormalize(..) => "rms_normalize",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::SliceCols(..) => "slice_cols",
            Op::Index(..) => "index",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::GatherRows(..) => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulScalar(a, b) | Op::DivScalar(a, b) => {
                vec![*a, *b]
            }
            Op::MatMul(a, b) | Op::Linear(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddConst(a, _)
            | Op::Recip(a)
            | Op::Transpose(a)
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::RmsNormalize(a)
            | Op::Reshape(a, _)
            | Op::SliceCols(a, ..)
            | Op::Index(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::GatherRows(a, _) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat(parts, _) => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Mean token-level cross-entropy over positions whose target is `Some`.
pub fn cross_entropy_value(logits: &Tensor, targets: &[Option<usize>], smoothing: f64) -> Result<Tensor> {
    if logits.rank() != 2 || logits.rows() != targets.len() {
        return Err(Error::dim(
            "cross_entropy",
            format!("logits {:?} for {} targets", logits.shape(), targets.len()),
        ));
    }
    let vocab = logits.cols();
    let logp = logits.log_softmax(1)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= vocab {
            return Err(Error::Input(format!("target id {t} out of range for vocab {vocab}")));
        }
        let row = &logp.data()[p * vocab..(p + 1) * vocab];
        let mut nll = -(1.0 - smoothing) * row[t];
        if smoothing != 0.0 {
            nll -= smoothing * row.iter().sum::<f64>() / vocab as f64;
        }
        total += nll;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("cross-entropy over an all-pad target".into()));
    }
    Ok(Tensor::scalar(total / count as f64))
}

fn forward(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let v = |x: &Var| &nodes[x.0].value;
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => v(a).add(v(b))?,
        Op::Sub(a, b) => v(a).sub(v(b))?,
        Op::Mul(a, b) => v(a).mul(v(b))?,
        Op::Scale(a, c) => v(a).scale(*c),
        Op::AddConst(a, c) => v(a).map(|x| x + c),
        Op::MulScalar(a, s) => {
            let s = v(s);
            if s.len() != 1 {
                return Err(Error::dim("mul_scalar", format!("scalar operand has shape {:?}", s.shape())));
            }
            v(a).scale(s.item())
        }
        Op::DivScalar(a, s) => {
            let s = v(s);
            if s.len() != 1 {
                return Err(Error::dim("div_scalar", format!("scalar operand has shape {:?}", s.shape())));
            }
            let d = s.item();
            v(a).map(|x| x / d)
        }
        Op::Recip(a) => v(a).map(|x| 1.0 / x),
        Op::MatMul(a, b) => v(a).matmul(v(b))?,
        Op::Linear(a, b) => v(a).linear(v(b))?,
        Op::Transpose(a) => v(a).transpose()?,
        Op::Gelu(a) => v(a).gelu(),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => v(a).clamped_log(),
        Op::Softplus(a) => v(a).softplus(),
        Op::Softmax(a, axis) => v(a).softmax(*axis)?,
        Op::LogSoftmax(a, axis) => v(a).log_softmax(*axis)?,
        Op::LayerNorm { x, gain, bias, eps } => v(x).layer_norm(v(gain), v(bias), *eps)?,
        Op::RmsNormalize(a) => v(a).rms_normalize(),
        Op::Concat(parts, axis) => {
            let refs: Vec<&Tensor> = parts.iter().map(v).collect();
            Tensor::concat(&refs, *axis)?
        }
        Op::Reshape(a, shape) => v(a).reshape(shape)?,
        Op::SliceCols(a, lo, hi) => v(a).slice_cols(*lo, *hi)?,
        Op::Index(a, i) => {
            let t = v(a);
            if *i >= t.len() {
                return Err(Error::dim("index", format!("{i} out of range for {:?}", t.shape())));
            }
            Tensor::scalar(t.data()[*i])
        }
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::Mean(a) => Tensor::scalar(v(a).mean()),
        Op::GatherRows(a, ids) => v(a).gather_rows(ids)?,
        Op::CrossEntropy {
            logits,
            targets,
            smoothing,
        } => cross_entropy_value(v(logits), targets, *smoothing)?,
    };
    out.ensure_finite(op.name())
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf. Leaves that do not
    /// require grad, or that the loss does not reach, get exact zeros.
    pub fn wrt(&self, var: Var) -> &Tensor {
        self.leaves
            .get(&var)
            .unwrap_or_else(|| panic!("{var:?} is not a leaf of this tape"))
    }

    pub fn global_norm(&self, vars: &[Var]) -> f64 {
        vars.iter()
            .map(|v| self.wrt(*v).data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`; handles to dropped
    /// nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let t = t.ensure_finite("leaf")?;
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = forward(&op, &self.nodes)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddConst(a, c))
    }

    /// `a` multiplied by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.push(Op::MulScalar(a, s))
    }

    /// `a` divided by the single-element tensor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.push(Op::DivScalar(a, s))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Recip(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn linear(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Linear(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    /// Natural log with the input clamped at [`LOG_CLAMP`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softplus(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.push(Op::Softmax(a, axis))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.push(Op::LogSoftmax(a, axis))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn rms_normalize(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RmsNormalize(a))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.push(Op::Concat(parts.to_vec(), axis))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.reshape(a, &[n])
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        self.push(Op::SliceCols(a, lo, hi))
    }

    /// Element `i` of the flattened tensor, as a single-element tensor.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        self.push(Op::Index(a, i))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::GatherRows(table, ids.to_vec()))
    }

    /// Mean cross-entropy of row-wise `logits` against `targets`; `None`
    /// positions are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], smoothing: f64) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            smoothing,
        })
    }

    /// Recomputes every non-leaf node from the recorded ops.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut replayed: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => forward(op, &replayed)?,
            };
            replayed.push(Node {
                value,
                op: node.op.clone(),
                requires_grad: node.requires_grad,
            });
        }
        Ok(replayed.into_iter().map(|n| n.value).collect())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        let mut leaves = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads.get_mut(idx).and_then(Option::take) {
                Some(g) if node.requires_grad => g,
                _ => Tensor::zeros(node.value.shape()),
            };
            leaves.insert(Var(idx), g);
        }
        Ok(Gradients { leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_scaled_in_place(&g, 1.0)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    self.accumulate(grads, *a, g.mul(val(b))?)?;
                }
                if needs(b) {
                    self.accumulate(grads, *b, g.mul(val(a))?)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::AddConst(a, _) => self.accumulate(grads, *a, g.clone())?,
            Op::MulScalar(a, s) => {
                if needs(a) {
                    self.accumulate(grads, *a, g.scale(val(s).item()))?;
                }
                if needs(s) {
                    let d: f64 = g.data().iter().zip(val(a).data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, Tensor::scalar(d))?;
                }
            }
            Op::DivScalar(a, s) => {
                let d = val(s).item();
                if needs(a) {
                    self.accumulate(grads, *a, g.map(|gi| gi / d))?;
                }
                if needs(s) {
                    let dot: f64 = g.data().iter().zip(val(a).data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, Tensor::scalar(-dot / (d * d)))?;
                }
            }
            Op::Recip(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, g.zip_with(y, "recip", |gi, yi| -gi * yi * yi)?)?;
            }
            Op::MatMul(a, b) => {
                if needs(a) {
                    self.accumulate(grads, *a, g.linear(val(b))?)?;
                }
                if needs(b) {
                    self.accumulate(grads, *b, val(a).transpose()?.matmul(g)?)?;
                }
            }
            Op::Linear(a, b) => {
                if needs(a) {
                    self.accumulate(grads, *a, g.matmul(val(b))?)?;
                }
                if needs(b) {
                    self.accumulate(grads, *b, g.transpose()?.matmul(val(a))?)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::Gelu(a) => {
                let d = g.zip_with(val(a), "gelu", |gi, xi| gi * gelu_grad(xi))?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.mul(&node.value)?)?,
            Op::Log(a) => {
                let d = g.zip_with(val(a), "log", |gi, xi| if xi > LOG_CLAMP { gi / xi } else { 0.0 })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Softplus(a) => {
                let d = g.zip_with(val(a), "softplus", |gi, xi| gi * sigmoid(xi))?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g.data()[idx(j)] * y.data()[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] = y.data()[idx(j)] * (g.data()[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?)?;
            }
            Op::LogSoftmax(a, axis) => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let gsum: f64 = (0..n).map(|j| g.data()[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] = g.data()[idx(j)] - y.data()[idx(j)].exp() * gsum;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?)?;
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = val(x);
                let (rows, d) = (xv.rows(), xv.cols());
                let gamma = val(gain).data();
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut gh = vec![0.0; d];
                for r in 0..rows {
                    let row = &xv.data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv;
                        gh[j] = grow[j] * gamma[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    let mean_gh = gh.iter().sum::<f64>() / d as f64;
                    let mean_ghx = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv * (gh[j] - mean_gh - xhat[j] * mean_ghx);
                    }
                }
                if needs(x) {
                    self.accumulate(grads, *x, Tensor::new(vec![rows, d], dx)?)?;
                }
                if needs(gain) {
                    self.accumulate(grads, *gain, Tensor::new(vec![d], dgain)?)?;
                }
                if needs(bias) {
                    self.accumulate(grads, *bias, Tensor::new(vec![d], dbias)?)?;
                }
            }
            Op::RmsNormalize(a) => {
                let xv = val(a);
                let rms = xv.rms();
                if rms < RMS_FLOOR {
                    self.accumulate(grads, *a, g.clone())?;
                } else {
                    let y = &node.value;
                    let mean_gy = g.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>() / y.len() as f64;
                    let d = g.zip_with(y, "rms_normalize", |gi, yi| (gi - yi * mean_gy) / rms)?;
                    self.accumulate(grads, *a, d)?;
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for p in parts {
                    let shape = val(p).shape().to_vec();
                    let width = shape[*axis];
                    if needs(p) {
                        let mut d = Vec::with_capacity(val(p).len());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + width * inner]);
                        }
                        self.accumulate(grads, *p, Tensor::new(shape, d)?)?;
                    }
                    offset += width;
                }
            }
            Op::Reshape(a, _) => self.accumulate(grads, *a, g.reshape(val(a).shape())?)?,
            Op::SliceCols(a, lo, hi) => {
                let xv = val(a);
                let (rows, cols) = (xv.rows(), xv.cols());
                let w = hi - lo;
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + lo..r * cols + hi].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *a, Tensor::new(vec![rows, cols], d)?)?;
            }
            Op::Index(a, i) => {
                let mut d = Tensor::zeros(val(a).shape());
                d.data_mut()[*i] = g.item();
                self.accumulate(grads, *a, d)?;
            }
            Op::Sum(a) => self.accumulate(grads, *a, Tensor::filled(val(a).shape(), g.item()))?,
            Op::Mean(a) => {
                let n = val(a).len() as f64;
                self.accumulate(grads, *a, Tensor::filled(val(a).shape(), g.item() / n))?;
            }
            Op::GatherRows(a, ids) => {
                let table = val(a);
                let m = table.cols();
                let mut d = Tensor::zeros(table.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..m {
                        d.data_mut()[id * m + j] += g.data()[r * m + j];
                    }
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
            } => {
                let lv = val(logits);
                let vocab = lv.cols();
                let probs = lv.softmax(1)?;
                let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                let coef = g.item() / count;
                let mut d = vec![0.0; lv.len()];
                for (p, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for v in 0..vocab {
                        let onehot = if v == t { 1.0 - smoothing } else { 0.0 };
                        d[p * vocab + v] = coef * (probs.data()[p * vocab + v] - onehot - smoothing / vocab as f64);
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?)?;
            }
        }
        Ok(())
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
