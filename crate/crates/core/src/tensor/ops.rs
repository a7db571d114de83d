use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::{numel, Op, Tensor};
use crate::error::{Error, Result};

/// Index map from output positions into a broadcast operand, or `None` when
/// the operand already has the output shape.
pub(crate) fn broadcast_map(small: &[usize], big: &[usize]) -> Option<Vec<usize>> {
    if small == big {
        return None;
    }
    let n = numel(big);
    if numel(small) == 1 {
        return Some(vec![0; n]);
    }
    let offset = big.len() - small.len();
    let mut small_strides = vec![0usize; big.len()];
    let mut stride = 1;
    for i in (0..small.len()).rev() {
        small_strides[i + offset] = if small[i] == 1 { 0 } else { stride };
        stride *= small[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; big.len()];
    for _ in 0..n {
        let mut s = 0;
        for (k, &i) in idx.iter().enumerate() {
            s += i * small_strides[k];
        }
        map.push(s);
        for k in (0..big.len()).rev() {
            idx[k] += 1;
            if idx[k] < big[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Some(map)
}

/// Whether `small` broadcasts into `big`: scalar, or right-aligned with every
/// dimension equal or 1.
fn broadcasts_into(small: &[usize], big: &[usize]) -> bool {
    if numel(small) == 1 {
        return true;
    }
    if small.len() > big.len() {
        return false;
    }
    let offset = big.len() - small.len();
    small
        .iter()
        .enumerate()
        .all(|(i, &s)| s == big[i + offset] || s == 1)
}

struct Binary {
    shape: Vec<usize>,
    a_map: Option<Vec<usize>>,
    b_map: Option<Vec<usize>>,
}

fn binary_layout(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Binary> {
    let (sa, sb) = (a.shape(), b.shape());
    let shape = if sa == sb || broadcasts_into(sb, sa) {
        sa.to_vec()
    } else if broadcasts_into(sa, sb) {
        sb.to_vec()
    } else {
        return Err(Error::shape(op, format!("cannot broadcast {:?} with {:?}", sa, sb)));
    };
    Ok(Binary {
        a_map: broadcast_map(sa, &shape),
        b_map: broadcast_map(sb, &shape),
        shape,
    })
}

#[inline]
fn pick(data: &[f64], map: &Option<Vec<usize>>, i: usize) -> f64 {
    match map {
        None => data[i],
        Some(m) => data[m[i]],
    }
}

fn elementwise(
    name: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    op: impl FnOnce(Tensor, Tensor) -> Op,
) -> Result<Tensor> {
    let layout = binary_layout(name, a, b)?;
    let n = numel(&layout.shape);
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = if layout.a_map.is_none() && layout.b_map.is_none() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        (0..n)
            .map(|i| f(pick(ad, &layout.a_map, i), pick(bd, &layout.b_map, i)))
            .collect()
    };
    let any = a.requires_grad() || b.requires_grad();
    Tensor::from_op(name, layout.shape, data, || op(a.clone(), b.clone()), any)
}

fn unary(name: &'static str, a: &Tensor, f: impl Fn(f64) -> f64, op: impl FnOnce(Tensor) -> Op) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::from_op(name, a.shape().to_vec(), data, || op(a.clone()), a.requires_grad())
}

/// Splits a rank-2/3 shape into (batch, rows, cols).
pub(crate) fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(Option<usize>, usize, usize)> {
    match *shape {
        [r, c] => Ok((None, r, c)),
        [b, r, c] => Ok((Some(b), r, c)),
        _ => Err(Error::shape(op, format!("expected rank 2 or 3, got {:?}", shape))),
    }
}

fn square_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    let (batch, r, c) = matrix_dims(op, shape)?;
    if r != c {
        return Err(Error::shape(op, format!("expected square matrices, got {:?}", shape)));
    }
    Ok((batch.unwrap_or(1), r))
}

impl Tensor {
    /// Matrix product over the last two axes. Rank-3 operands are batched; a
    /// rank-2 operand is shared across the other operand's batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ba, m, k) = matrix_dims("matmul", self.shape())?;
        let (bb, k2, n) = matrix_dims("matmul", other.shape())?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let batch = match (ba, bb) {
            (Some(x), Some(y)) if x != y => {
                return Err(Error::shape("matmul", format!("batch sizes differ: {x} vs {y}")))
            }
            (Some(x), _) | (_, Some(x)) => Some(x),
            (None, None) => None,
        };
        let nb = batch.unwrap_or(1);
        let mut out = vec![0.0; nb * m * n];
        let (ad, bd) = (self.data(), other.data());
        for t in 0..nb {
            let a = if ba.is_some() { &ad[t * m * k..(t + 1) * m * k] } else { ad };
            let b = if bb.is_some() { &bd[t * k * n..(t + 1) * k * n] } else { bd };
            kernels::matmul_nn(a, b, m, k, n, &mut out[t * m * n..(t + 1) * m * n]);
        }
        let shape = match batch {
            Some(b) => vec![b, m, n],
            None => vec![m, n],
        };
        let any = self.requires_grad() || other.requires_grad();
        Tensor::from_op("matmul", shape, out, || Op::MatMul(self.clone(), other.clone()), any)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        elementwise("add", self, other, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        elementwise("sub", self, other, |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        elementwise("mul", self, other, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        elementwise("div", self, other, |x, y| x / y, Op::Div)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        unary("scale", self, |x| x * c, |a| Op::Scale(a, c))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        unary("add_scalar", self, |x| x + c, Op::AddScalar)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let (batch, r, c) = matrix_dims("transpose", self.shape())?;
        let nb = batch.unwrap_or(1);
        let mut out = vec![0.0; self.numel()];
        for t in 0..nb {
            kernels::transpose_into(
                &self.data()[t * r * c..(t + 1) * r * c],
                r,
                c,
                &mut out[t * r * c..(t + 1) * r * c],
            );
        }
        let shape = match batch {
            Some(b) => vec![b, c, r],
            None => vec![c, r],
        };
        Tensor::from_op("transpose", shape, out, || Op::Transpose(self.clone()), self.requires_grad())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            ));
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            || Op::Reshape(self.clone()),
            self.requires_grad(),
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            out.extend_from_slice(&self.data()[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        Tensor::from_op(
            "slice",
            new_shape,
            out,
            || Op::Slice { input: self.clone(), axis, start },
            self.requires_grad(),
        )
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {:?}", base)));
        }
        let mut total = 0;
        for t in inputs {
            let s = t.shape();
            let same = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", s, base)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in inputs {
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        let any = inputs.iter().any(|t| t.requires_grad());
        Tensor::from_op(
            "concat",
            shape,
            out,
            || Op::Concat { inputs: inputs.iter().map(|t| (*t).clone()).collect(), axis },
            any,
        )
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s = self.data().iter().sum();
        Tensor::from_op("sum", vec![], vec![s], || Op::Sum(self.clone()), self.requires_grad())
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.data().iter().sum::<f64>() / self.numel() as f64;
        Tensor::from_op("mean", vec![], vec![s], || Op::Mean(self.clone()), self.requires_grad())
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        Tensor::from_op(
            "sum_axis",
            new_shape,
            out,
            || Op::SumAxis { input: self.clone(), axis },
            self.requires_grad(),
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary("exp", self, libm::exp, Op::Exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::invalid(format!("log of non-positive value {v}")));
        }
        unary("log", self, libm::log, Op::Log)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        unary("tanh", self, libm::tanh, Op::Tanh)
    }

    pub fn relu(&self) -> Result<Tensor> {
        unary("relu", self, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    /// `ln(1 + eˣ)`, computed without overflow.
    pub fn softplus(&self) -> Result<Tensor> {
        unary("softplus", self, kernels::softplus, Op::Softplus)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let w = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(w) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Tensor::from_op("softmax", self.shape().to_vec(), out, || Op::Softmax(self.clone()), self.requires_grad())
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let w = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        let mut out = self.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / w.max(1));
        for row in out.chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            || Op::LayerNorm { input: self.clone(), rstd },
            self.requires_grad(),
        )
    }

    /// Lower Cholesky factor of each (batched) square matrix. Reads the lower
    /// triangle only; its gradient is expressed in the same convention.
    pub fn cholesky_lower(&self) -> Result<Tensor> {
        let (nb, d) = square_dims("cholesky", self.shape())?;
        let mut out = self.data().to_vec();
        for t in 0..nb {
            kernels::cholesky_in_place(&mut out[t * d * d..(t + 1) * d * d], d)
                .map_err(|minor| Error::NotPositiveDefinite { minor })?;
        }
        Tensor::from_op("cholesky", self.shape().to_vec(), out, || Op::Cholesky(self.clone()), self.requires_grad())
    }

    /// Solves `A X = B` for symmetric positive-definite `A` (lower triangle
    /// read) via Cholesky. `A` may be shared across a batched `B` or batched
    /// alongside it.
    pub fn solve_spd(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ba, d, d2) = matrix_dims("solve_spd", self.shape())?;
        if d != d2 {
            return Err(Error::shape("solve_spd", format!("A must be square, got {:?}", self.shape())));
        }
        let (bb, r, k) = matrix_dims("solve_spd", rhs.shape())?;
        if r != d {
            return Err(Error::shape(
                "solve_spd",
                format!("A is {:?} but B is {:?}", self.shape(), rhs.shape()),
            ));
        }
        if let (Some(x), Some(y)) = (ba, bb) {
            if x != y {
                return Err(Error::shape("solve_spd", format!("batch sizes differ: {x} vs {y}")));
            }
        }
        if ba.is_some() && bb.is_none() {
            return Err(Error::shape("solve_spd", "batched A requires batched B"));
        }
        let mut factor = self.data().to_vec();
        let na = ba.unwrap_or(1);
        for t in 0..na {
            kernels::cholesky_in_place(&mut factor[t * d * d..(t + 1) * d * d], d)
                .map_err(|minor| Error::NotPositiveDefinite { minor })?;
        }
        let nb = bb.unwrap_or(1);
        let mut out = rhs.data().to_vec();
        for t in 0..nb {
            let l = if ba.is_some() { &factor[t * d * d..(t + 1) * d * d] } else { &factor[..] };
            kernels::cholesky_solve(l, &mut out[t * d * k..(t + 1) * d * k], d, k);
        }
        let any = self.requires_grad() || rhs.requires_grad();
        Tensor::from_op(
            "solve_spd",
            rhs.shape().to_vec(),
            out,
            || Op::SolveSpd { a: self.clone(), b: rhs.clone(), factor },
            any,
        )
    }

    /// Main diagonal of each (batched) square matrix.
    pub fn diagonal(&self) -> Result<Tensor> {
        let (batch, d, c) = matrix_dims("diagonal", self.shape())?;
        if d != c {
            return Err(Error::shape("diagonal", format!("expected square, got {:?}", self.shape())));
        }
        let nb = batch.unwrap_or(1);
        let mut out = Vec::with_capacity(nb * d);
        for t in 0..nb {
            for i in 0..d {
                out.push(self.data()[t * d * d + i * d + i]);
            }
        }
        let shape = match batch {
            Some(b) => vec![b, d],
            None => vec![d],
        };
        Tensor::from_op("diagonal", shape, out, || Op::Diagonal(self.clone()), self.requires_grad())
    }
}

/// Primitive kinds accepted by [`apply_primitive`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Transpose,
    Reshape,
    Slice { axis: usize, start: usize, end: usize },
    Concat { axis: usize },
    Sum,
    Mean,
    SumAxis(usize),
    Exp,
    Log,
    Tanh,
    Relu,
    Softplus,
    Softmax,
    LayerNorm { eps: f64 },
    Cholesky,
    SolveSpd,
    Diagonal,
}

/// Applies a primitive by kind. `shape` is consulted only by `Reshape`.
pub fn apply_primitive(kind: Primitive, inputs: &[&Tensor], shape: &[usize]) -> Result<Tensor> {
    let arity = match kind {
        Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::SolveSpd => 2,
        Primitive::Concat { .. } => inputs.len().max(1),
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(Error::invalid(format!("{:?} takes {arity} inputs, got {}", kind, inputs.len())));
    }
    let a = inputs[0];
    match kind {
        Primitive::MatMul => a.matmul(inputs[1]),
        Primitive::Add => a.add(inputs[1]),
        Primitive::Sub => a.sub(inputs[1]),
        Primitive::Mul => a.mul(inputs[1]),
        Primitive::Div => a.div(inputs[1]),
        Primitive::Scale(c) => a.scale(c),
        Primitive::AddScalar(c) => a.add_scalar(c),
        Primitive::Transpose => a.transpose(),
        Primitive::Reshape => a.reshape(shape),
        Primitive::Slice { axis, start, end } => a.slice(axis, start, end),
        Primitive::Concat { axis } => Tensor::concat(inputs, axis),
        Primitive::Sum => a.sum(),
        Primitive::Mean => a.mean(),
        Primitive::SumAxis(axis) => a.sum_axis(axis),
        Primitive::Exp => a.exp(),
        Primitive::Log => a.log(),
        Primitive::Tanh => a.tanh(),
        Primitive::Relu => a.relu(),
        Primitive::Softplus => a.softplus(),
        Primitive::Softmax => a.softmax(),
        Primitive::LayerNorm { eps } => a.layer_norm(eps),
        Primitive::Cholesky => a.cholesky_lower(),
        Primitive::SolveSpd => a.solve_spd(inputs[1]),
        Primitive::Diagonal => a.diagonal(),
    }
}
