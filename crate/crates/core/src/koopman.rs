//! Measurement function, one-step eDMD and linear rollout in measurement space.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::ridge_pinv;
use crate::nn::{SkipKind, TanhMlp};
use crate::params::{ParamSet, ParamStore};
use crate::Tensor;

/// Scale of the random last-layer weights of ψ at initialization.
const PSI_OUT_GAIN: f64 = 0.01;

/// Learnable measurement function ψ: `d → 2d → 2d → d` tanh MLP on top of an
/// identity path, so that at initialization ψ is the identity plus small noise.
#[derive(Debug, Clone)]
pub struct MeasurementMlp {
    net: TanhMlp,
    dim: usize,
}

impl MeasurementMlp {
    pub const PREFIX: &'static str = "psi";

    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, d: usize) -> Result<()> {
        TanhMlp::init(store, rng, Self::PREFIX, d, 2 * d, d, PSI_OUT_GAIN, SkipKind::Identity)
    }

    pub fn load(ps: &ParamSet) -> Result<MeasurementMlp> {
        let dim = ps.get("psi.l0.weight")?.shape()[1];
        Ok(MeasurementMlp { net: TanhMlp::load(ps, Self::PREFIX, SkipKind::Identity)?, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// ψ applied to every token column of `batch × d × n`.
pub fn measure(psi: &MeasurementMlp, tokens: &Tensor) -> Result<Tensor> {
    let d = tokens.shape().get(tokens.rank().wrapping_sub(2)).copied();
    if d != Some(psi.dim()) {
        return Err(Error::shape(
            "measure",
            format!("tokens {:?} do not have measurement dimension {}", tokens.shape(), psi.dim()),
        ));
    }
    psi.net.forward_columns(tokens)
}

/// One-step eDMD: `X_fore · pinv(X_back)` per batch element, where `X_back`
/// drops the last token and `X_fore` drops the first.
pub fn fit_local_operator(x_star: &Tensor, lambda: f64) -> Result<Tensor> {
    let n = *x_star
        .shape()
        .last()
        .ok_or_else(|| Error::shape("fit_local_operator", "scalar input"))?;
    if n < 2 {
        return Err(Error::invalid(format!(
            "one-step eDMD needs at least 2 tokens, got {n}"
        )));
    }
    let axis = x_star.rank() - 1;
    let back = x_star.slice(axis, 0, n - 1)?;
    let fore = x_star.slice(axis, 1, n)?;
    fore.matmul(&ridge_pinv(&back, lambda)?)
}

/// Which parts make up the effective operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorMode {
    /// `K_loc + K_glo`.
    Mixed,
    LocalOnly,
    GlobalOnly,
}

/// Local (per-window, data-driven) and global (learned, shared) operators.
#[derive(Debug, Clone)]
pub struct KoopmanOperator {
    /// `batch × d × d`, recomputed every forward pass.
    pub local: Option<Tensor>,
    /// `d × d` learnable.
    pub global: Option<Tensor>,
}

impl KoopmanOperator {
    pub const GLOBAL: &'static str = "koopman.k_glo";

    pub fn init(store: &mut ParamStore, d: usize) -> Result<()> {
        store.insert(Self::GLOBAL, &[d, d], alloc::vec![0.0; d * d])
    }

    /// Builds the operator for one batch of measured tokens.
    pub fn fit(ps: &ParamSet, x_star: &Tensor, lambda: f64, mode: OperatorMode) -> Result<KoopmanOperator> {
        let local = match mode {
            OperatorMode::Mixed | OperatorMode::LocalOnly => Some(fit_local_operator(x_star, lambda)?),
            OperatorMode::GlobalOnly => None,
        };
        let global = match mode {
            OperatorMode::Mixed | OperatorMode::GlobalOnly => Some(ps.get(Self::GLOBAL)?.clone()),
            OperatorMode::LocalOnly => None,
        };
        Ok(KoopmanOperator { local, global })
    }

    /// `K = K_loc + K_glo` (whichever parts are present).
    pub fn effective(&self) -> Result<Tensor> {
        match (&self.local, &self.global) {
            (Some(l), Some(g)) => l.add(g),
            (Some(l), None) => Ok(l.clone()),
            (None, Some(g)) => Ok(g.clone()),
            (None, None) => Err(Error::invalid("Koopman operator has no parts")),
        }
    }
}

/// Iterates `K` from `x1`: context reconstruction `[x1, Kx1, …, K^{n−1}x1]`
/// and horizon `[Kⁿx1, …, K^{n+m−1}x1]`. Works on `d × d` / `d` or batched
/// `batch × d × d` / `batch × d × 1` inputs.
pub fn rollout(k: &Tensor, x1: &Tensor, n: usize, m: usize) -> Result<(Tensor, Tensor)> {
    if n == 0 || m == 0 {
        return Err(Error::invalid(format!("rollout needs n, m >= 1, got n={n}, m={m}")));
    }
    let d = *k.shape().last().ok_or_else(|| Error::shape("rollout", "scalar operator"))?;
    let start = match (k.rank(), x1.rank()) {
        (2, 3) => x1.clone(),
        (2, _) => x1.reshape(&[d, 1])?,
        (3, _) => x1.reshape(&[k.shape()[0], d, 1])?,
        _ => return Err(Error::shape("rollout", format!("operator must be rank 2 or 3, got {:?}", k.shape()))),
    };
    if start.shape()[start.rank() - 2..] != [d, 1] {
        return Err(Error::shape("rollout", format!("start {:?} does not fit operator {:?}", x1.shape(), k.shape())));
    }
    let mut columns: Vec<Tensor> = Vec::with_capacity(n + m);
    columns.push(start);
    for step in 1..(n + m) {
        let next = k
            .matmul(columns.last().expect("non-empty"))
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Instability { stage: "rollout", step },
                e => e,
            })?;
        next.check_finite("rollout")
            .map_err(|_| Error::Instability { stage: "rollout", step })?;
        columns.push(next);
    }
    let axis = columns[0].rank() - 1;
    let context: Vec<&Tensor> = columns[..n].iter().collect();
    let horizon: Vec<&Tensor> = columns[n..].iter().collect();
    Ok((Tensor::concat(&context, axis)?, Tensor::concat(&horizon, axis)?))
}
