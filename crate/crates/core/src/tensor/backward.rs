use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::ops::{broadcast_map, matrix_dims};
use super::{Op, Tensor};
use crate::error::{Error, Result};

/// Sums `g` (laid out in the output shape) back onto an operand via its
/// broadcast index map.
fn reduce_to(g: &[f64], map: &Option<Vec<usize>>, len: usize, f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    match map {
        None => g.iter().enumerate().map(|(i, &v)| f(i, v)).collect(),
        Some(m) => {
            let mut out = vec![0.0; len];
            for (i, &v) in g.iter().enumerate() {
                out[m[i]] += f(i, v);
            }
            out
        }
    }
}

fn maps(a: &Tensor, b: &Tensor, out: &[usize]) -> (Option<Vec<usize>>, Option<Vec<usize>>) {
    (broadcast_map(a.shape(), out), broadcast_map(b.shape(), out))
}

#[inline]
fn at(data: &[f64], map: &Option<Vec<usize>>, i: usize) -> f64 {
    match map {
        None => data[i],
        Some(m) => data[m[i]],
    }
}

impl Op {
    /// Gradients for each parent, in `parents()` order. `None` for parents
    /// that do not require gradients.
    fn backward(&self, g: &[f64], out: &Tensor) -> Vec<Option<Vec<f64>>> {
        let want = |t: &Tensor| t.requires_grad();
        let out_shape = out.shape();
        match self {
            Op::MatMul(a, b) => {
                let (ba, m, k) = matrix_dims("matmul", a.shape()).expect("checked in forward");
                let (bb, _, n) = matrix_dims("matmul", b.shape()).expect("checked in forward");
                let nb = ba.or(bb).unwrap_or(1);
                let ga = want(a).then(|| {
                    let mut ga = vec![0.0; a.numel()];
                    for t in 0..nb {
                        let bt = if bb.is_some() { &b.data()[t * k * n..(t + 1) * k * n] } else { b.data() };
                        let dst = if ba.is_some() { &mut ga[t * m * k..(t + 1) * m * k] } else { &mut ga[..] };
                        kernels::matmul_nt(&g[t * m * n..(t + 1) * m * n], bt, m, n, k, dst);
                    }
                    ga
                });
                let gb = want(b).then(|| {
                    let mut gb = vec![0.0; b.numel()];
                    for t in 0..nb {
                        let at_ = if ba.is_some() { &a.data()[t * m * k..(t + 1) * m * k] } else { a.data() };
                        let dst = if bb.is_some() { &mut gb[t * k * n..(t + 1) * k * n] } else { &mut gb[..] };
                        kernels::matmul_tn(at_, &g[t * m * n..(t + 1) * m * n], k, m, n, dst);
                    }
                    gb
                });
                vec![ga, gb]
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (ma, mb) = maps(a, b, out_shape);
                vec![
                    want(a).then(|| reduce_to(g, &ma, a.numel(), |_, v| v)),
                    want(b).then(|| reduce_to(g, &mb, b.numel(), |_, v| sign * v)),
                ]
            }
            Op::Mul(a, b) => {
                let (ma, mb) = maps(a, b, out_shape);
                vec![
                    want(a).then(|| reduce_to(g, &ma, a.numel(), |i, v| v * at(b.data(), &mb, i))),
                    want(b).then(|| reduce_to(g, &mb, b.numel(), |i, v| v * at(a.data(), &ma, i))),
                ]
            }
            Op::Div(a, b) => {
                let (ma, mb) = maps(a, b, out_shape);
                vec![
                    want(a).then(|| reduce_to(g, &ma, a.numel(), |i, v| v / at(b.data(), &mb, i))),
                    want(b).then(|| {
                        reduce_to(g, &mb, b.numel(), |i, v| {
                            let y = at(b.data(), &mb, i);
                            -v * at(a.data(), &ma, i) / (y * y)
                        })
                    }),
                ]
            }
            Op::Scale(_, c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Op::AddScalar(_) | Op::Reshape(_) => vec![Some(g.to_vec())],
            Op::Transpose(a) => {
                let (batch, r, c) = matrix_dims("transpose", a.shape()).expect("checked in forward");
                let mut ga = vec![0.0; a.numel()];
                for t in 0..batch.unwrap_or(1) {
                    kernels::transpose_into(&g[t * r * c..(t + 1) * r * c], c, r, &mut ga[t * r * c..(t + 1) * r * c]);
                }
                vec![Some(ga)]
            }
            Op::Slice { input, axis, start } => {
                let shape = input.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut gi = vec![0.0; input.numel()];
                for o in 0..outer {
                    let dst = o * shape[*axis] * inner + start * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gi)]
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let len = t.shape()[*axis];
                        let r = want(t).then(|| {
                            let mut gt = Vec::with_capacity(t.numel());
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                gt.extend_from_slice(&g[src..src + len * inner]);
                            }
                            gt
                        });
                        offset += len;
                        r
                    })
                    .collect()
            }
            Op::Sum(a) => vec![Some(vec![g[0]; a.numel()])],
            Op::Mean(a) => vec![Some(vec![g[0] / a.numel() as f64; a.numel()])],
            Op::SumAxis { input, axis } => {
                let shape = input.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = shape[*axis];
                let mut gi = Vec::with_capacity(input.numel());
                for o in 0..outer {
                    for _ in 0..len {
                        gi.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gi)]
            }
            Op::Exp(_) => vec![Some(g.iter().zip(out.data()).map(|(v, y)| v * y).collect())],
            Op::Log(a) => vec![Some(g.iter().zip(a.data()).map(|(v, x)| v / x).collect())],
            Op::Tanh(_) => vec![Some(g.iter().zip(out.data()).map(|(v, y)| v * (1.0 - y * y)).collect())],
            Op::Relu(a) => vec![Some(
                g.iter().zip(a.data()).map(|(v, &x)| if x > 0.0 { *v } else { 0.0 }).collect(),
            )],
            Op::Softplus(a) => vec![Some(
                g.iter().zip(a.data()).map(|(v, &x)| v * kernels::sigmoid(x)).collect(),
            )],
            Op::Softmax(_) => {
                let w = *out_shape.last().expect("softmax rank");
                let mut gi = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(w).zip(out.data().chunks(w)).zip(gi.chunks_mut(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(gi)]
            }
            Op::LayerNorm { rstd, .. } => {
                let w = *out_shape.last().expect("layer_norm rank");
                let wf = w as f64;
                let mut gi = vec![0.0; g.len()];
                for (row, ((gr, yr), dst)) in g.chunks(w).zip(out.data().chunks(w)).zip(gi.chunks_mut(w)).enumerate() {
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    let r = rstd[row];
                    for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = r / wf * (wf * gv - sum_g - yv * sum_gy);
                    }
                }
                vec![Some(gi)]
            }
            Op::Cholesky(a) => {
                let (batch, d, _) = matrix_dims("cholesky", a.shape()).expect("checked in forward");
                let mut ga = vec![0.0; a.numel()];
                for t in 0..batch.unwrap_or(1) {
                    let l = &out.data()[t * d * d..(t + 1) * d * d];
                    let gl = &g[t * d * d..(t + 1) * d * d];
                    // M = Lᵀ tril(Ḡ), then Φ(M): lower triangle with halved diagonal.
                    let mut lbar = gl.to_vec();
                    for i in 0..d {
                        for j in (i + 1)..d {
                            lbar[i * d + j] = 0.0;
                        }
                    }
                    let mut m = vec![0.0; d * d];
                    kernels::matmul_tn(l, &lbar, d, d, d, &mut m);
                    for i in 0..d {
                        m[i * d + i] *= 0.5;
                        for j in (i + 1)..d {
                            m[i * d + j] = 0.0;
                        }
                    }
                    // S = L⁻ᵀ Φ(M) L⁻¹, computed as solves.
                    kernels::solve_lower_transposed(l, &mut m, d, d);
                    let mut mt = vec![0.0; d * d];
                    kernels::transpose_into(&m, d, d, &mut mt);
                    kernels::solve_lower_transposed(l, &mut mt, d, d);
                    // mt now holds Sᵀ; symmetric part is ½(S + Sᵀ).
                    let dst = &mut ga[t * d * d..(t + 1) * d * d];
                    for i in 0..d {
                        for j in 0..d {
                            dst[i * d + j] = 0.5 * (mt[i * d + j] + mt[j * d + i]);
                        }
                    }
                    kernels::fold_symmetric_to_lower(dst, d);
                }
                vec![Some(ga)]
            }
            Op::SolveSpd { a, b, factor } => {
                let (ba, d, _) = matrix_dims("solve_spd", a.shape()).expect("checked in forward");
                let (bb, _, k) = matrix_dims("solve_spd", b.shape()).expect("checked in forward");
                let nb = bb.unwrap_or(1);
                // Ḃ = A⁻¹ Ḡ (A symmetric).
                let mut gb = g.to_vec();
                for t in 0..nb {
                    let l = if ba.is_some() { &factor[t * d * d..(t + 1) * d * d] } else { &factor[..] };
                    kernels::cholesky_solve(l, &mut gb[t * d * k..(t + 1) * d * k], d, k);
                }
                let ga = want(a).then(|| {
                    let mut ga = vec![0.0; a.numel()];
                    for t in 0..nb {
                        let dst = if ba.is_some() { &mut ga[t * d * d..(t + 1) * d * d] } else { &mut ga[..] };
                        let x = &out.data()[t * d * k..(t + 1) * d * k];
                        let mut prod = vec![0.0; d * d];
                        kernels::matmul_nt(&gb[t * d * k..(t + 1) * d * k], x, d, k, d, &mut prod);
                        for (o, p) in dst.iter_mut().zip(&prod) {
                            *o -= p;
                        }
                    }
                    let na = ba.unwrap_or(1);
                    for t in 0..na {
                        kernels::fold_symmetric_to_lower(&mut ga[t * d * d..(t + 1) * d * d], d);
                    }
                    ga
                });
                vec![ga, want(b).then_some(gb)]
            }
            Op::Diagonal(a) => {
                let (batch, d, _) = matrix_dims("diagonal", a.shape()).expect("checked in forward");
                let mut ga = vec![0.0; a.numel()];
                for t in 0..batch.unwrap_or(1) {
                    for i in 0..d {
                        ga[t * d * d + i * d + i] = g[t * d + i];
                    }
                }
                vec![Some(ga)]
            }
        }
    }
}

impl Tensor {
    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable tensor that requires them; a second call adds again.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Backward("loss is not attached to any parameter".into()));
        }
        self.check_finite("loss")?;

        let mut seen = BTreeSet::new();
        let mut order = Vec::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(op) = &t.node().op {
                for p in op.parents() {
                    if p.requires_grad() && seen.insert(p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by_key(|t| core::cmp::Reverse(t.id()));

        let mut pending: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in &order {
            let Some(g) = pending.remove(&t.id()) else { continue };
            if let Some(op) = &t.node().op {
                let grads = op.backward(&g, t);
                for (p, pg) in op.parents().into_iter().zip(grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(x, y)| *x += y),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
            let mut slot = t.node().grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
