//! Patch tokenization and linear token embedding.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::Tensor;

/// Lower bound on per-variable standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// How window statistics are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Normalization {
    /// Per-window, per-variable mean and std of the context.
    Instance,
    /// The same per-variable statistics for every window.
    Fixed { mean: Vec<f64>, std: Vec<f64> },
}

impl Normalization {
    /// Identity statistics (no rescaling).
    pub fn none(n_vars: usize) -> Normalization {
        Normalization::Fixed { mean: alloc::vec![0.0; n_vars], std: alloc::vec![1.0; n_vars] }
    }
}

/// A batch of (context, target) windows with per-window, per-variable
/// standardization statistics computed from the context only.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// Raw context, `batch × N × T`.
    pub context: Tensor,
    /// Raw target, `batch × N × L`.
    pub target: Tensor,
    /// `batch × N`.
    pub mean: Tensor,
    /// `batch × N`, floored at [`STD_FLOOR`].
    pub std: Tensor,
}

impl WindowBatch {
    /// Builds a batch from raw windows; each window is `N × T` / `N × L`
    /// row-major.
    pub fn from_windows(n_vars: usize, contexts: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<WindowBatch> {
        Self::from_windows_normalized(n_vars, contexts, targets, &Normalization::Instance)
    }

    pub fn from_windows_normalized(
        n_vars: usize,
        contexts: &[Vec<f64>],
        targets: &[Vec<f64>],
        norm: &Normalization,
    ) -> Result<WindowBatch> {
        if let Normalization::Fixed { mean, std } = norm {
            if mean.len() != n_vars || std.len() != n_vars {
                return Err(Error::shape("window_batch", format!("statistics for {} variables, expected {n_vars}", mean.len())));
            }
        }
        if contexts.is_empty() || contexts.len() != targets.len() {
            return Err(Error::invalid(format!(
                "need matching non-empty window lists, got {} contexts and {} targets",
                contexts.len(),
                targets.len()
            )));
        }
        let t = contexts[0].len() / n_vars.max(1);
        let l = targets[0].len() / n_vars.max(1);
        if n_vars == 0 || t == 0 || l == 0 {
            return Err(Error::invalid("windows must have at least one variable and step"));
        }
        let b = contexts.len();
        let mut ctx = Vec::with_capacity(b * n_vars * t);
        let mut tgt = Vec::with_capacity(b * n_vars * l);
        let mut mean = Vec::with_capacity(b * n_vars);
        let mut std = Vec::with_capacity(b * n_vars);
        for (c, y) in contexts.iter().zip(targets) {
            if c.len() != n_vars * t || y.len() != n_vars * l {
                return Err(Error::shape("window_batch", "ragged windows"));
            }
            for v in 0..n_vars {
                match norm {
                    Normalization::Instance => {
                        let row = &c[v * t..(v + 1) * t];
                        let mu = row.iter().sum::<f64>() / t as f64;
                        let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / t as f64;
                        mean.push(mu);
                        std.push(libm::sqrt(var).max(STD_FLOOR));
                    }
                    Normalization::Fixed { mean: m, std: s } => {
                        mean.push(m[v]);
                        std.push(s[v].max(STD_FLOOR));
                    }
                }
            }
            ctx.extend_from_slice(c);
            tgt.extend_from_slice(y);
        }
        Ok(WindowBatch {
            context: Tensor::new(&[b, n_vars, t], ctx)?,
            target: Tensor::new(&[b, n_vars, l], tgt)?,
            mean: Tensor::new(&[b, n_vars], mean)?,
            std: Tensor::new(&[b, n_vars], std)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.context.shape()[0]
    }

    pub fn n_vars(&self) -> usize {
        self.context.shape()[1]
    }

    pub fn context_len(&self) -> usize {
        self.context.shape()[2]
    }

    pub fn horizon(&self) -> usize {
        self.target.shape()[2]
    }

    /// Keeps only the listed batch rows.
    pub fn select(&self, rows: &[usize]) -> Result<WindowBatch> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            let per: usize = t.shape()[1..].iter().product();
            let mut data = Vec::with_capacity(rows.len() * per);
            for &r in rows {
                data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = rows.len();
            Tensor::new(&shape, data)
        };
        Ok(WindowBatch {
            context: pick(&self.context)?,
            target: pick(&self.target)?,
            mean: pick(&self.mean)?,
            std: pick(&self.std)?,
        })
    }

    fn stats_column(&self, t: &Tensor) -> Result<Tensor> {
        t.reshape(&[self.batch_size(), self.n_vars(), 1])
    }

    /// `(X − mean) / std` on the context.
    pub fn standardized_context(&self) -> Result<Tensor> {
        self.context
            .sub(&self.stats_column(&self.mean)?)?
            .div(&self.stats_column(&self.std)?)
    }

    /// Maps standardized `batch × N × len` values back to the original scale.
    pub fn destandardize(&self, x: &Tensor) -> Result<Tensor> {
        x.mul(&self.stats_column(&self.std)?)?.add(&self.stats_column(&self.mean)?)
    }

    /// Scales standardized spreads back to the original scale.
    pub fn destandardize_scale(&self, sigma: &Tensor) -> Result<Tensor> {
        sigma.mul(&self.stats_column(&self.std)?)
    }
}

/// `batch × N × T` → `batch × (N·s) × n`. Column `i` is patch `i`, flattened
/// variable-major (all `s` steps of variable 0, then variable 1, ...).
pub fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let [b, n_vars, t] = *x.shape() else {
        return Err(Error::shape("patchify", format!("expected batch×N×T, got {:?}", x.shape())));
    };
    if patch == 0 || t % patch != 0 {
        return Err(Error::Divisibility { len: t, patch });
    }
    let n = t / patch;
    x.reshape(&[b * n_vars, n, patch])?
        .transpose()?
        .reshape(&[b, n_vars * patch, n])
}

/// Inverse of [`patchify`]: `batch × (N·s) × n` → `batch × N × (n·s)`.
pub fn unpatchify(tokens: &Tensor, n_vars: usize, patch: usize) -> Result<Tensor> {
    let [b, rows, n] = *tokens.shape() else {
        return Err(Error::shape("unpatchify", format!("expected batch×(N·s)×n, got {:?}", tokens.shape())));
    };
    if rows != n_vars * patch {
        return Err(Error::shape(
            "unpatchify",
            format!("token length {rows} is not N·s = {n_vars}·{patch}"),
        ));
    }
    tokens
        .reshape(&[b * n_vars, patch, n])?
        .transpose()?
        .reshape(&[b, n_vars, n * patch])
}

/// `W · col + b` for every token column.
pub fn embed(patches: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [_, flat, _] = *patches.shape() else {
        return Err(Error::shape("embed", format!("expected batch×(N·s)×n, got {:?}", patches.shape())));
    };
    let [d, w_in] = *weight.shape() else {
        return Err(Error::shape("embed", format!("weight must be d×(N·s), got {:?}", weight.shape())));
    };
    if w_in != flat || bias.numel() != d {
        return Err(Error::shape(
            "embed",
            format!("weight {:?} / bias {:?} vs patches {:?}", weight.shape(), bias.shape(), patches.shape()),
        ));
    }
    weight.matmul(patches)?.add(&bias.reshape(&[d, 1])?)
}
