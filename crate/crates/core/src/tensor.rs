//! Dense row-major `f64` tensors.
//!
//! Every operation here is a pure value computation. The autograd tape in
//! [`crate::autograd`] calls into these for its forward pass, so a tape replay
//! and a direct call produce bit-identical results.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Inputs to `log` are clamped from below at this value.
pub const LOG_CLAMP: f64 = 1e-12;

/// Segments whose RMS falls below this pass through `rms_normalize` unscaled.
pub const RMS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim("tensor", format!("extents must be positive, got {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&s| s > 0), "bad shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(&[1], value)
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = normal.sample(rng);
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn require_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.require_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_scaled_in_place(&mut self, other: &Tensor, c: f64) -> Result<()> {
        self.require_same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.require_matrix("matmul")?;
        let (k2, m) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// `self · otherᵀ`, the usual dense-layer product with `other` stored as out×in.
    pub fn linear(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.require_matrix("linear")?;
        let (m, k2) = other.require_matrix("linear")?;
        if k != k2 {
            return Err(Error::dim("linear", format!("inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (n, m) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Row-major flattening to a vector.
    pub fn flatten(&self) -> Tensor {
        Tensor {
            shape: vec![self.data.len()],
            data: self.data.clone(),
            requires_grad: false,
        }
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::dim(op, format!("axis {axis} out of range for {:?}", self.shape)));
        }
        Ok(())
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "softmax")?;
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| self.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (self.data[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)?.ensure_finite("softmax")
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "log_softmax")?;
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| self.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (self.data[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[idx(j)] = self.data[idx(j)] - lse;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)?.ensure_finite("log_softmax")
    }

    /// Row-wise layer normalization of a matrix followed by `gain ⊙ · + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (n, d) = self.require_matrix("layer_norm")?;
        if gain.shape != [d] || bias.shape != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!("affine {:?}/{:?} for width {d}", gain.shape, bias.shape),
            ));
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &self.data[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * inv * gain.data[j] + bias.data[j];
            }
        }
        Tensor::new(vec![n, d], out)?.ensure_finite("layer_norm")
    }

    /// Root mean square over all elements.
    pub fn rms(&self) -> f64 {
        (self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    /// Scales the whole tensor to unit RMS; tensors with RMS below
    /// [`RMS_FLOOR`] are returned unchanged.
    pub fn rms_normalize(&self) -> Tensor {
        let rms = self.rms();
        if rms < RMS_FLOOR {
            self.clone().with_requires_grad(false)
        } else {
            self.scale(1.0 / rms)
        }
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu)
    }

    pub fn softplus(&self) -> Tensor {
        self.map(softplus)
    }

    pub fn clamped_log(&self) -> Tensor {
        self.map(|v| v.max(LOG_CLAMP).ln())
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        first.check_axis(axis, "concat")?;
        for p in parts {
            if p.rank() != first.rank()
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(k, (a, b))| k != axis && a != b)
            {
                return Err(Error::dim("concat", format!("{:?} vs {:?}", p.shape, first.shape)));
            }
        }
        let (outer, _, inner) = split_axis(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Tensor::new(shape, data)
    }

    /// Columns `lo..hi` of a matrix.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Tensor> {
        let (n, m) = self.require_matrix("slice_cols")?;
        if lo >= hi || hi > m {
            return Err(Error::dim("slice_cols", format!("{lo}..{hi} of {m} columns")));
        }
        let w = hi - lo;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&self.data[i * m + lo..i * m + hi]);
        }
        Tensor::new(vec![n, w], data)
    }

    /// Rows of `self` selected by `ids`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (n, m) = self.require_matrix("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::dim("gather_rows", "no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            if id >= n {
                return Err(Error::Input(format!("row id {id} out of range for {n} rows")));
            }
            data.extend_from_slice(&self.data[id * m..(id + 1) * m]);
        }
        Tensor::new(vec![ids.len(), m], data)
    }

    /// Raw bytes of the data as little-endian f64, for hashing.
    pub fn le_bytes(&self) -> impl Iterator<Item = u8> + '_ {
        self.shape
            .iter()
            .flat_map(|s| (*s as u64).to_le_bytes())
            .chain(self.data.iter().flat_map(|v| v.to_le_bytes()))
    }
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_matmul_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(Tensor::eye(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn zero_matmul_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(Tensor::zeros(&[2, 3]).matmul(&m).unwrap(), Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[4, 2])).unwrap_err();
        assert_eq!(err.kind(), "dimension");
    }

    #[test]
    fn linear_equals_matmul_with_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let direct = a.linear(&b).unwrap();
        let via_t = a.matmul(&b.transpose().unwrap()).unwrap();
        assert!(direct.max_abs_diff(&via_t) < 1e-14);
    }

    #[test]
    fn softmax_of_equal_values_is_uniform() {
        let s = Tensor::vector(&[0.0, 0.0, 0.0]).unwrap().softmax(0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_columns() {
        let t = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(t.softmax(2).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = Tensor::vector(&[1000.0, 1000.0]).unwrap().softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn flatten_keeps_row_major_order() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let f = t.flatten();
        assert_eq!(f.shape(), &[6]);
        assert_eq!(f.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[5, 7], 3.0, &mut rng).map(|v| v + 2.0);
        let y = x.layer_norm(&Tensor::ones(&[7]), &Tensor::zeros(&[7]), 0.0).unwrap();
        for i in 0..5 {
            let row: Vec<f64> = (0..7).map(|j| y.at(i, j)).collect();
            let mean = row.iter().sum::<f64>() / 7.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-10, "var {var}");
        }
    }

    #[test]
    fn concat_along_both_axes() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let rows = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(rows.shape(), &[2, 2]);
        let cols = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(cols.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cols.shape(), &[1, 4]);
    }

    #[test]
    fn rms_normalize_passes_zero_through() {
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(z.rms_normalize(), z);
        let t = Tensor::vector(&[3.0, 4.0]).unwrap().rms_normalize();
        assert!((t.rms() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for &y in &[0.01, 0.5, 0.95, 3.0, 40.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12);
        }
    }
}
