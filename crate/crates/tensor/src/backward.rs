use crate::error::TensorError;
use crate::kernels::{gemm, gemm_batched};
use crate::real::Real;
use crate::tape::{gelu_grad, inv_temperature, mask_index, Op, Tape, Var};

/// Gradients of a scalar loss with respect to every node that requires one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, numel: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); numel])
    }
}

fn acc<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let y = node.value.data();
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let numel = |v: Var| self.nodes[v.0].value.numel();
            let val = |v: Var| self.nodes[v.0].value.data();

            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(gy);
                    continue;
                }
                &Op::MatMul { a, b, tb, b_shared, batch, m, k, n } => {
                    if needs(a) {
                        // dA = dC · op(B)ᵀ
                        let ga = acc(&mut grads[a.0], numel(a));
                        gemm_batched(&gy, false, val(b), !tb, b_shared, ga, batch, m, n, k);
                    }
                    if needs(b) {
                        let gb = acc(&mut grads[b.0], numel(b));
                        let ad = val(a);
                        if b_shared {
                            if tb {
                                // dB[n×k] = dCᵀ · A over all batch rows
                                gemm(&gy, true, ad, false, gb, n, batch * m, k);
                            } else {
                                gemm(ad, true, &gy, false, gb, k, batch * m, n);
                            }
                        } else {
                            let (sa, sc, sb) = (m * k, m * n, k * n);
                            for bi in 0..batch {
                                let gbb = &mut gb[bi * sb..(bi + 1) * sb];
                                let gc = &gy[bi * sc..(bi + 1) * sc];
                                let aa = &ad[bi * sa..(bi + 1) * sa];
                                if tb {
                                    gemm(gc, true, aa, false, gbb, n, m, k);
                                } else {
                                    gemm(aa, true, gc, false, gbb, k, m, n);
                                }
                            }
                        }
                    }
                }
                &Op::Add(a, b) => {
                    for v in [a, b] {
                        if needs(v) {
                            let g = acc(&mut grads[v.0], gy.len());
                            g.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d);
                        }
                    }
                }
                &Op::AddBroadcast(a, b) => {
                    if needs(a) {
                        let g = acc(&mut grads[a.0], gy.len());
                        g.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d);
                    }
                    if needs(b) {
                        let nb = numel(b);
                        let g = acc(&mut grads[b.0], nb);
                        for (i, &d) in gy.iter().enumerate() {
                            g[i % nb] += d;
                        }
                    }
                }
                &Op::Mul(a, b) => {
                    let (ad, bd) = (val(a), val(b));
                    if needs(a) {
                        let g = acc(&mut grads[a.0], gy.len());
                        for i in 0..gy.len() {
                            g[i] += gy[i] * bd[i];
                        }
                    }
                    if needs(b) {
                        let g = acc(&mut grads[b.0], gy.len());
                        for i in 0..gy.len() {
                            g[i] += gy[i] * ad[i];
                        }
                    }
                }
                &Op::Scale(a, s) => {
                    let g = acc(&mut grads[a.0], gy.len());
                    g.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d * s);
                }
                &Op::Gelu(x) => {
                    let xd = val(x);
                    let g = acc(&mut grads[x.0], gy.len());
                    for i in 0..gy.len() {
                        g[i] += gy[i] * gelu_grad(xd[i]);
                    }
                }
                &Op::Softmax(x) => {
                    let n = node.value.last_dim();
                    let g = acc(&mut grads[x.0], gy.len());
                    for r in 0..gy.len() / n {
                        let (yr, dr) = (&y[r * n..(r + 1) * n], &gy[r * n..(r + 1) * n]);
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let c = numel(gamma);
                    let gam = val(gamma);
                    if needs(gamma) {
                        let g = acc(&mut grads[gamma.0], c);
                        for (i, &d) in gy.iter().enumerate() {
                            g[i % c] += d * xhat[i];
                        }
                    }
                    if needs(beta) {
                        let g = acc(&mut grads[beta.0], c);
                        for (i, &d) in gy.iter().enumerate() {
                            g[i % c] += d;
                        }
                    }
                    if needs(x) {
                        let g = acc(&mut grads[x.0], gy.len());
                        let cf = T::of(c as f64);
                        for (r, &rs) in rstd.iter().enumerate() {
                            let base = r * c;
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..c {
                                let dh = gy[base + j] * gam[j];
                                m1 += dh;
                                m2 += dh * xhat[base + j];
                            }
                            m1 /= cf;
                            m2 /= cf;
                            for j in 0..c {
                                let dh = gy[base + j] * gam[j];
                                g[base + j] += rs * (dh - m1 - xhat[base + j] * m2);
                            }
                        }
                    }
                }
                Op::GatherRows { x, index } => {
                    let x = *x;
                    let c = node.value.last_dim();
                    let g = acc(&mut grads[x.0], numel(x));
                    for (i, &src) in index.iter().enumerate() {
                        for j in 0..c {
                            g[src * c + j] += gy[i * c + j];
                        }
                    }
                }
                Op::ScatterAddRows { x, index } => {
                    let x = *x;
                    let c = node.value.last_dim();
                    let g = acc(&mut grads[x.0], numel(x));
                    for (i, &t) in index.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += gy[t * c + j];
                        }
                    }
                }
                Op::MaskedFill { x, mask, heads, inner } => {
                    let g = acc(&mut grads[x.0], gy.len());
                    for (e, &d) in gy.iter().enumerate() {
                        if mask[mask_index(e, *heads, *inner)] {
                            g[e] += d;
                        }
                    }
                }
                &Op::Sum(x) => {
                    let g = acc(&mut grads[x.0], numel(x));
                    g.iter_mut().for_each(|g| *g += gy[0]);
                }
                &Op::Mean(x) => {
                    let n = numel(x);
                    let d = gy[0] / T::of(n as f64);
                    let g = acc(&mut grads[x.0], n);
                    g.iter_mut().for_each(|g| *g += d);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let x = *x;
                    let c = node.value.last_dim();
                    let xd = val(x);
                    let g = acc(&mut grads[x.0], gy.len());
                    for (r, &nrm) in norms.iter().enumerate() {
                        let base = r * c;
                        let floored = nrm.as_f64() <= crate::tape::NORM_EPS
                            && xd[base..base + c].iter().map(|&v| v * v).sum::<T>().sqrt() < nrm;
                        let dot: T = (0..c).map(|j| gy[base + j] * y[base + j]).sum();
                        for j in 0..c {
                            let d = if floored { gy[base + j] } else { gy[base + j] - y[base + j] * dot };
                            g[base + j] += d / nrm;
                        }
                    }
                }
                &Op::ConcatCols { a, b } => {
                    let (ca, cb) = (self.nodes[a.0].value.last_dim(), self.nodes[b.0].value.last_dim());
                    let rows = gy.len() / (ca + cb);
                    if needs(a) {
                        let g = acc(&mut grads[a.0], rows * ca);
                        for r in 0..rows {
                            for j in 0..ca {
                                g[r * ca + j] += gy[r * (ca + cb) + j];
                            }
                        }
                    }
                    if needs(b) {
                        let g = acc(&mut grads[b.0], rows * cb);
                        for r in 0..rows {
                            for j in 0..cb {
                                g[r * cb + j] += gy[r * (ca + cb) + ca + j];
                            }
                        }
                    }
                }
                &Op::Reshape(x) => {
                    let g = acc(&mut grads[x.0], gy.len());
                    g.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d);
                }
                &Op::TransposeLast2(x) => {
                    let s = self.nodes[x.0].value.shape();
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    let g = acc(&mut grads[x.0], gy.len());
                    for blk in 0..gy.len() / (r * c).max(1) {
                        let base = blk * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                g[base + i * c + j] += gy[base + j * r + i];
                            }
                        }
                    }
                }
                &Op::SplitHeads { x, window, heads } => {
                    let s = node.value.shape();
                    let (w, d) = (s[0], s[3]);
                    let c = heads * d;
                    let g = acc(&mut grads[x.0], gy.len());
                    for wi in 0..w {
                        for h in 0..heads {
                            for i in 0..window {
                                let src = ((wi * heads + h) * window + i) * d;
                                let dst = (wi * window + i) * c + h * d;
                                for e in 0..d {
                                    g[dst + e] += gy[src + e];
                                }
                            }
                        }
                    }
                }
                &Op::MergeHeads { x, window, heads } => {
                    let s = self.nodes[x.0].value.shape();
                    let (w, d) = (s[0], s[3]);
                    let c = heads * d;
                    let g = acc(&mut grads[x.0], gy.len());
                    for wi in 0..w {
                        for h in 0..heads {
                            for i in 0..window {
                                let dst = ((wi * heads + h) * window + i) * d;
                                let src = (wi * window + i) * c + h * d;
                                for e in 0..d {
                                    g[dst + e] += gy[src + e];
                                }
                            }
                        }
                    }
                }
                &Op::Temperature { x, log_tau, heads, inner } => {
                    let lt = val(log_tau);
                    let f: Vec<(T, bool)> = lt.iter().map(|&v| inv_temperature(v)).collect();
                    if needs(x) {
                        let g = acc(&mut grads[x.0], gy.len());
                        for (e, &d) in gy.iter().enumerate() {
                            g[e] += d * f[(e / inner) % heads].0;
                        }
                    }
                    if needs(log_tau) {
                        let xd = val(x);
                        let g = acc(&mut grads[log_tau.0], heads);
                        for (e, &d) in gy.iter().enumerate() {
                            let h = (e / inner) % heads;
                            let (fh, clamped) = f[h];
                            if !clamped {
                                g[h] -= d * xd[e] * fh;
                            }
                        }
                    }
                }
                Op::WeightedCrossEntropy { logits, probs, labels, weights, valid, count } => {
                    let c = weights.len();
                    let scale = gy[0] / T::of(*count as f64);
                    let g = acc(&mut grads[logits.0], probs.len());
                    for r in 0..labels.len() {
                        if !valid[r] {
                            continue;
                        }
                        let wy = weights[labels[r]] * scale;
                        for j in 0..c {
                            let onehot = if j == labels[r] { T::one() } else { T::zero() };
                            g[r * c + j] += wy * (probs[r * c + j] - onehot);
                        }
                    }
                }
                Op::MaskedMse { pred, target, valid, count } => {
                    let pd = val(*pred);
                    let scale = T::of(2.0) * gy[0] / T::of(*count as f64);
                    let g = acc(&mut grads[pred.0], pd.len());
                    for i in 0..pd.len() {
                        if valid[i] {
                            g[i] += scale * (pd[i] - target[i]);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}
