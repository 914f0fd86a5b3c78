//! Operation recording. Every primitive computes its value eagerly and
//! appends a node; [`Tape::backward`](crate::backward) replays the nodes in
//! reverse.

use std::sync::Arc;

use crate::error::{invalid, mismatch, TensorError};
use crate::kernels::gemm_batched;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
        b_shared: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows {
        x: Var,
        index: Arc<[usize]>,
    },
    ScatterAddRows {
        x: Var,
        index: Arc<[usize]>,
    },
    MaskedFill {
        x: Var,
        mask: Arc<[bool]>,
        heads: usize,
        inner: usize,
    },
    Sum(Var),
    Mean(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    Reshape(Var),
    TransposeLast2(Var),
    SplitHeads {
        x: Var,
        window: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        window: usize,
        heads: usize,
    },
    Temperature {
        x: Var,
        log_tau: Var,
        heads: usize,
        inner: usize,
    },
    WeightedCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Arc<[usize]>,
        weights: Arc<[T]>,
        valid: Arc<[bool]>,
        count: usize,
    },
    MaskedMse {
        pred: Var,
        target: Arc<[T]>,
        valid: Arc<[bool]>,
        count: usize,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Smallest temperature of cosine attention.
pub const TAU_MIN: f64 = 0.01;
/// Row norm floor of [`Tape::l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;
/// Variance epsilon of [`Tape::layer_norm`].
pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

/// Effective inverse temperature `1 / max(exp(log_tau), TAU_MIN)` and whether
/// the floor is active.
#[inline]
pub(crate) fn inv_temperature<T: Real>(log_tau: T) -> (T, bool) {
    let tau = log_tau.exp();
    if tau.as_f64() < TAU_MIN {
        (T::of(1.0 / TAU_MIN), true)
    } else {
        (T::one() / tau, false)
    }
}

/// Record of primitive operations. Single-threaded; distinct tapes are independent.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = {
            let t = self.value(x);
            Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
        };
        self.push(value, op, &[x])
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]`. A 2-D right operand
    /// is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a · bᵀ` with `b` shaped `[.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op = if tb { "matmul_nt" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch(op, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if tb {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let lead = &sa[..sa.len() - 2];
        let b_shared = sb.len() == 2;
        if k != kb || (!b_shared && &sb[..sb.len() - 2] != lead) {
            return Err(mismatch(op, &sa, &sb));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        gemm_batched(self.data(a), false, self.data(b), tb, b_shared, &mut out, batch, m, k, n);
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, tb, b_shared, batch, m, k, n }, &[a, b]))
    }

    /// `x · w + b` over the last dimension; `w` is `[in, out]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        if self.shape(w).len() != 2 {
            return Err(mismatch("linear", self.shape(x), self.shape(w)));
        }
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (repeated over leading dims).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add_broadcast", sa, sb));
        }
        let bd = self.data(b);
        let nb = bd.len().max(1);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x + bd[i % nb]).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.map(a, Op::Scale(a, s), |v| v * s)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), gelu)
    }

    /// Softmax over the last dimension. `-inf` entries get probability exactly zero.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(t.shape(), data).unwrap();
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let xd = self.data(x);
        let rows = xd.len() / c.max(1);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        let cf = T::of(c as f64);
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Rows of a 2-D tensor selected by `index` (repeats allowed):
    /// `out[i] = x[index[i]]`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(invalid("gather_rows", format!("expected 2-D input, got {s:?}")));
        }
        let (rows, c) = (s[0], s[1]);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: i, len: rows });
            }
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(&[index.len(), c], out)?;
        Ok(self.push(value, Op::GatherRows { x, index }, &[x]))
    }

    /// `out[index[i]] += x[i]` into `rows` zero-initialized rows.
    pub fn scatter_add_rows(
        &mut self,
        x: Var,
        index: Arc<[usize]>,
        rows: usize,
    ) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != index.len() {
            return Err(invalid("scatter_add_rows", format!("input {s:?} vs {} indices", index.len())));
        }
        let c = s[1];
        let xd = self.data(x);
        let mut out = vec![T::zero(); rows * c];
        for (i, &t) in index.iter().enumerate() {
            if t >= rows {
                return Err(TensorError::IndexOutOfRange { op: "scatter_add_rows", index: t, len: rows });
            }
            for j in 0..c {
                out[t * c + j] += xd[i * c + j];
            }
        }
        let value = Tensor::new(&[rows, c], out)?;
        Ok(self.push(value, Op::ScatterAddRows { x, index }, &[x]))
    }

    /// Sets entries to `value` where `mask` is false. `mask` either matches `x`
    /// elementwise or, for `x` shaped `[W, H, n, m]`, is shaped `[W, n, m]` and
    /// shared by the `H` heads.
    pub fn masked_fill(&mut self, x: Var, mask: Arc<[bool]>, value: T) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let numel: usize = s.iter().product();
        let (heads, inner) = if mask.len() == numel {
            (1, numel.max(1))
        } else if s.len() == 4 && mask.len() * s[1] == numel {
            (s[1], s[2] * s[3])
        } else {
            return Err(mismatch("masked_fill", &s, &[mask.len()]));
        };
        let xd = self.data(x);
        let data = xd
            .iter()
            .enumerate()
            .map(|(e, &v)| if mask[mask_index(e, heads, inner)] { v } else { value })
            .collect();
        let out = Tensor::new(&s, data)?;
        Ok(self.push(out, Op::MaskedFill { x, mask, heads, inner }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: T = d.iter().copied().sum::<T>() / T::of(d.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Scales each row of the last dimension to unit L2 norm (norm floored at [`NORM_EPS`]).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.last_dim();
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / c.max(1));
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(NORM_EPS));
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let value = Tensor::new(t.shape(), data).unwrap();
        self.push(value, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Concatenates two 2-D tensors along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(mismatch("concat_cols", sa, sb));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(&[rows, ca + cb], out)?;
        Ok(self.push(value, Op::ConcatCols { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Swaps the last two dimensions.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(invalid("transpose_last2", format!("needs rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for (blk, src) in xd.chunks(r * c.max(1)).enumerate() {
            let dst = &mut out[blk * r * c..(blk + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::TransposeLast2(x), &[x]))
    }

    /// `[N, heads·d]` token matrix to `[N/window, heads, window, d]`.
    pub fn split_heads(&mut self, x: Var, window: usize, heads: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || window == 0 || s[0] % window != 0 || heads == 0 || s[1] % heads != 0 {
            return Err(invalid(
                "split_heads",
                format!("cannot split {s:?} into windows of {window} and {heads} heads"),
            ));
        }
        let (n, c) = (s[0], s[1]);
        let (w, d) = (n / window, c / heads);
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for wi in 0..w {
            for h in 0..heads {
                for i in 0..window {
                    let src = &xd[(wi * window + i) * c + h * d..][..d];
                    out[((wi * heads + h) * window + i) * d..][..d].copy_from_slice(src);
                }
            }
        }
        let value = Tensor::new(&[w, heads, window, d], out)?;
        Ok(self.push(value, Op::SplitHeads { x, window, heads }, &[x]))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(invalid("merge_heads", format!("expected rank 4, got {s:?}")));
        }
        let (w, heads, window, d) = (s[0], s[1], s[2], s[3]);
        let c = heads * d;
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for wi in 0..w {
            for h in 0..heads {
                for i in 0..window {
                    let src = &xd[((wi * heads + h) * window + i) * d..][..d];
                    out[(wi * window + i) * c + h * d..][..d].copy_from_slice(src);
                }
            }
        }
        let value = Tensor::new(&[w * window, c], out)?;
        Ok(self.push(value, Op::MergeHeads { x, window, heads }, &[x]))
    }

    /// Divides `[W, H, ..]` scores by the per-head temperature
    /// `max(exp(log_tau[h]), TAU_MIN)`.
    pub fn temperature_scale(&mut self, x: Var, log_tau: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let ls = self.shape(log_tau).to_vec();
        if s.len() < 2 || ls != [s[1]] {
            return Err(mismatch("temperature_scale", &s, &ls));
        }
        let lt = self.data(log_tau);
        if lt.iter().any(|v| !v.is_finite()) {
            return Err(invalid("temperature_scale", "non-finite log temperature"));
        }
        let heads = s[1];
        let inner: usize = s[2..].iter().product();
        let f: Vec<T> = lt.iter().map(|&v| inv_temperature(v).0).collect();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(e, &v)| v * f[(e / inner) % heads])
            .collect();
        let value = Tensor::new(&s, data)?;
        Ok(self.push(value, Op::Temperature { x, log_tau, heads, inner }, &[x, log_tau]))
    }

    /// Mean over valid rows of `weights[label] · (−log softmax(logits)[label])`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<[usize]>,
        weights: Arc<[T]>,
        valid: Arc<[bool]>,
    ) -> Result<Var, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] != valid.len() || s[1] != weights.len() {
            return Err(mismatch("weighted_cross_entropy", &s, &[labels.len(), weights.len()]));
        }
        let c = s[1];
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, row) in ld.chunks(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            if valid[r] {
                let y = labels[r];
                if y >= c {
                    return Err(TensorError::IndexOutOfRange { op: "weighted_cross_entropy", index: y, len: c });
                }
                total += weights[y] * (lse - row[y]);
                count += 1;
            }
        }
        if count == 0 {
            return Err(invalid("weighted_cross_entropy", "no valid rows"));
        }
        let loss = total / T::of(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedCrossEntropy { logits, probs, labels, weights, valid, count },
            &[logits],
        ))
    }

    /// Mean squared error of `pred` (one value per row) against `target` over valid rows.
    pub fn masked_mse(
        &mut self,
        pred: Var,
        target: Arc<[T]>,
        valid: Arc<[bool]>,
    ) -> Result<Var, TensorError> {
        let pd = self.data(pred);
        if pd.len() != target.len() || pd.len() != valid.len() {
            return Err(mismatch("masked_mse", self.shape(pred), &[target.len()]));
        }
        let mut total = T::zero();
        let mut count = 0usize;
        for i in 0..pd.len() {
            if valid[i] {
                let d = pd[i] - target[i];
                total += d * d;
                count += 1;
            }
        }
        if count == 0 {
            return Err(invalid("masked_mse", "empty valid set"));
        }
        let loss = total / T::of(count as f64);
        Ok(self.push(Tensor::scalar(loss), Op::MaskedMse { pred, target, valid, count }, &[pred]))
    }
}

#[inline]
pub(crate) fn mask_index(e: usize, heads: usize, inner: usize) -> usize {
    if heads == 1 {
        e
    } else {
        (e / (heads * inner)) * inner + e % inner
    }
}
