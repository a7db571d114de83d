//! Residual integrator, learnable linear-Gaussian state-space model and the
//! predict/update recursion with Joseph-form covariance.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, symmetrize, SpdMatrix};
use crate::nn::Linear;
use crate::params::{glorot, ParamSet, ParamStore};
use crate::Tensor;

const LN_EPS: f64 = 1e-5;
/// Glorot gain of the projections that feed the residual stream.
const RESIDUAL_OUT_GAIN: f64 = 0.01;

/// `softplus⁻¹(1)`: raw diagonal that makes the covariance factor the identity.
pub fn softplus_inv_one() -> f64 {
    libm::log(core::f64::consts::E - 1.0)
}

/// Number of attention heads for model width `d`: the largest divisor of `d`
/// not above 4.
pub fn attention_heads(d: usize) -> usize {
    (1..=4.min(d)).rev().find(|h| d.is_multiple_of(*h)).unwrap_or(1)
}

/// One pre-norm self-attention block with a tanh feed-forward layer, followed
/// by a learnable linear map along the token axis (`n → m`).
#[derive(Debug, Clone)]
pub struct IntegratorNet {
    ln1: (Tensor, Tensor),
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: (Tensor, Tensor),
    ff0: Linear,
    ff1: Linear,
    token_map: Tensor,
    heads: usize,
}

impl IntegratorNet {
    pub const PREFIX: &'static str = "integrator";

    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, d: usize, n: usize, m: usize) -> Result<()> {
        let p = Self::PREFIX;
        for ln in ["ln1", "ln2"] {
            store.insert(&format!("{p}.{ln}.gain"), &[d], vec![1.0; d])?;
            store.insert(&format!("{p}.{ln}.bias"), &[d], vec![0.0; d])?;
        }
        for name in ["q", "k", "v"] {
            Linear::init(store, rng, &format!("{p}.attn.{name}"), d, d, 1.0, false)?;
        }
        Linear::init(store, rng, &format!("{p}.attn.o"), d, d, RESIDUAL_OUT_GAIN, true)?;
        Linear::init(store, rng, &format!("{p}.ffn.l0"), d, 4 * d, 1.0, true)?;
        Linear::init(store, rng, &format!("{p}.ffn.l1"), 4 * d, d, RESIDUAL_OUT_GAIN, true)?;
        let map = if n == m {
            let mut eye = vec![0.0; n * n];
            for i in 0..n {
                eye[i * n + i] = 1.0;
            }
            eye
        } else {
            glorot(rng, n, m, 1.0)
        };
        store.insert(&format!("{p}.token_map"), &[m, n], map)
    }

    pub fn load(ps: &ParamSet) -> Result<IntegratorNet> {
        let p = Self::PREFIX;
        let ln = |name: &str| -> Result<(Tensor, Tensor)> {
            Ok((ps.get(&format!("{p}.{name}.gain"))?.clone(), ps.get(&format!("{p}.{name}.bias"))?.clone()))
        };
        let q = Linear::load(ps, &format!("{p}.attn.q"), false)?;
        let heads = attention_heads(q.out_features());
        Ok(IntegratorNet {
            ln1: ln("ln1")?,
            q,
            k: Linear::load(ps, &format!("{p}.attn.k"), false)?,
            v: Linear::load(ps, &format!("{p}.attn.v"), false)?,
            o: Linear::load(ps, &format!("{p}.attn.o"), true)?,
            ln2: ln("ln2")?,
            ff0: Linear::load(ps, &format!("{p}.ffn.l0"), true)?,
            ff1: Linear::load(ps, &format!("{p}.ffn.l1"), true)?,
            token_map: ps.get(&format!("{p}.token_map"))?.clone(),
            heads,
        })
    }

    fn attention(&self, h: &Tensor) -> Result<Tensor> {
        let d = self.q.out_features();
        let dh = d / self.heads;
        let q = self.q.forward_rows(h)?;
        let k = self.k.forward_rows(h)?;
        let v = self.v.forward_rows(h)?;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let (a, b) = (i * dh, (i + 1) * dh);
            let scores = q.slice(2, a, b)?.matmul(&k.slice(2, a, b)?.transpose()?)?.scale(scale)?;
            outs.push(scores.softmax()?.matmul(&v.slice(2, a, b)?)?);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        self.o.forward_rows(&Tensor::concat(&refs, 2)?)
    }

    /// `batch × d × n` residual tokens to `batch × d × m` control inputs.
    pub fn forward(&self, x_res: &Tensor) -> Result<Tensor> {
        let d = self.q.out_features();
        let n = self.token_map.shape()[1];
        if x_res.rank() != 3 || x_res.shape()[1] != d || x_res.shape()[2] != n {
            return Err(Error::shape(
                "integrate_residual",
                format!("expected batch x {d} x {n}, got {:?}", x_res.shape()),
            ));
        }
        let norm = |x: &Tensor, (g, b): &(Tensor, Tensor)| -> Result<Tensor> { x.layer_norm(LN_EPS)?.mul(g)?.add(b) };
        let x = x_res.transpose()?;
        let x = x.add(&self.attention(&norm(&x, &self.ln1)?)?)?;
        let ff = self.ff1.forward_rows(&self.ff0.forward_rows(&norm(&x, &self.ln2)?)?.tanh()?)?;
        let x = x.add(&ff)?;
        x.transpose()?.matmul(&self.token_map.transpose()?)
    }
}

/// Learnable state-space parameters: `A`, `B`, `H` and raw factors of `Q`, `R`.
pub struct KalmanParams;

impl KalmanParams {
    pub const A: &'static str = "kalman.a";
    pub const B: &'static str = "kalman.b";
    pub const H: &'static str = "kalman.h";
    pub const LQ: &'static str = "kalman.lq_raw";
    pub const LR: &'static str = "kalman.lr_raw";

    /// `A = B = H = I` and `Q = R = I`.
    pub fn init(store: &mut ParamStore, d: usize) -> Result<()> {
        let eye = |v: f64| {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                m[i * d + i] = v;
            }
            m
        };
        store.insert(Self::A, &[d, d], eye(1.0))?;
        store.insert(Self::B, &[d, d], eye(1.0))?;
        store.insert(Self::H, &[d, d], eye(1.0))?;
        store.insert(Self::LQ, &[d, d], eye(softplus_inv_one()))?;
        store.insert(Self::LR, &[d, d], eye(softplus_inv_one()))
    }

    /// Models without a control path carry no `B`; it resolves to zero.
    pub fn resolve(ps: &ParamSet) -> Result<StateSpace> {
        let a = ps.get(Self::A)?.clone();
        let b = match ps.get(Self::B) {
            Ok(b) => b.clone(),
            Err(_) => Tensor::zeros(a.shape()),
        };
        Ok(StateSpace {
            a,
            b,
            h: ps.get(Self::H)?.clone(),
            q: covariance_from_raw(ps.get(Self::LQ)?)?,
            r: covariance_from_raw(ps.get(Self::LR)?)?,
        })
    }
}

/// Lower factor from a raw square matrix: strict lower part as is, softplus
/// of the diagonal, upper part ignored.
pub fn lower_factor(raw: &Tensor) -> Result<Tensor> {
    let d = match *raw.shape() {
        [r, c] if r == c => r,
        _ => return Err(Error::shape("lower_factor", format!("expected square, got {:?}", raw.shape()))),
    };
    let mut strict = vec![0.0; d * d];
    let mut diag = vec![0.0; d * d];
    for i in 0..d {
        diag[i * d + i] = 1.0;
        for j in 0..i {
            strict[i * d + j] = 1.0;
        }
    }
    let strict = Tensor::new(&[d, d], strict)?;
    let diag = Tensor::new(&[d, d], diag)?;
    raw.mul(&strict)?.add(&raw.softplus()?.mul(&diag)?)
}

/// `L Lᵀ` with `L = lower_factor(raw)`.
pub fn covariance_from_raw(raw: &Tensor) -> Result<Tensor> {
    let l = lower_factor(raw)?;
    l.matmul(&l.transpose()?)
}

/// Resolved time-invariant model matrices, all `d × d` and shared across the batch.
#[derive(Debug, Clone)]
pub struct StateSpace {
    pub a: Tensor,
    pub b: Tensor,
    pub h: Tensor,
    pub q: Tensor,
    pub r: Tensor,
}

impl StateSpace {
    pub fn dim(&self) -> usize {
        self.a.shape()[0]
    }
}

/// Filter state after step `k`. `z` is `d × 1` or `batch × d × 1`; `p` is a
/// single `d × d` covariance (the recursion for `P` does not depend on data).
#[derive(Debug, Clone)]
pub struct KalmanState {
    pub z: Tensor,
    pub p: SpdMatrix,
    pub k: usize,
}

fn guard(t: Tensor, stage: &'static str, step: usize) -> Result<Tensor> {
    t.check_finite(stage).map_err(|_| Error::Instability { stage, step })?;
    Ok(t)
}

fn guard_err(e: Error, stage: &'static str, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Instability { stage, step },
        e => e.at_step(stage, step),
    }
}

/// `ẑ = A z + B u`, `P̂ = A P Aᵀ + Q` (symmetrized).
pub fn predict_step(state: &KalmanState, u: Option<&Tensor>, ss: &StateSpace) -> Result<(Tensor, SpdMatrix)> {
    let step = state.k + 1;
    let run = || -> Result<(Tensor, SpdMatrix)> {
        let mut z_hat = ss.a.matmul(&state.z)?;
        if let Some(u) = u {
            z_hat = z_hat.add(&ss.b.matmul(u)?)?;
        }
        let z_hat = guard(z_hat, "kalman predict", step)?;
        let p_hat = ss.a.matmul(state.p.tensor())?.matmul(&ss.a.transpose()?)?.add(&ss.q)?;
        let p_hat = guard(p_hat, "kalman predict", step)?;
        Ok((z_hat, SpdMatrix::new(p_hat)?))
    };
    run().map_err(|e| guard_err(e, "kalman predict", step))
}

/// Joseph-form covariance `(I − KH) P̂ (I − KH)ᵀ + K R Kᵀ`.
pub fn joseph_covariance(gain: &Tensor, h: &Tensor, p_hat: &Tensor, r: &Tensor) -> Result<Tensor> {
    let d = p_hat.shape()[0];
    let ikh = Tensor::eye(d).sub(&gain.matmul(h)?)?;
    let a = ikh.matmul(p_hat)?.matmul(&ikh.transpose()?)?;
    a.add(&gain.matmul(r)?.matmul(&gain.transpose()?)?)
}

/// Textbook covariance update `(I − KH) P̂`.
pub fn naive_covariance(gain: &Tensor, h: &Tensor, p_hat: &Tensor) -> Result<Tensor> {
    let d = p_hat.shape()[0];
    Tensor::eye(d).sub(&gain.matmul(h)?)?.matmul(p_hat)
}

/// Gain `P̂Hᵀ(HP̂Hᵀ + R)⁻¹`, computed as the transpose of a solve.
pub fn kalman_gain(p_hat: &SpdMatrix, h: &Tensor, r: &Tensor) -> Result<Tensor> {
    let hp = h.matmul(p_hat.tensor())?;
    let s = SpdMatrix::new(hp.matmul(&h.transpose()?)?.add(r)?)?;
    solve_spd(&s, &hp)?.transpose()
}

/// Measurement update against the observation `obs` (same layout as `z_hat`).
pub fn update_step(z_hat: &Tensor, p_hat: &SpdMatrix, obs: &Tensor, ss: &StateSpace, step: usize) -> Result<KalmanState> {
    let run = || -> Result<KalmanState> {
        let gain = kalman_gain(p_hat, &ss.h, &ss.r)?;
        let innovation = obs.sub(&ss.h.matmul(z_hat)?)?;
        let z = guard(z_hat.add(&gain.matmul(&innovation)?)?, "kalman update", step)?;
        let p = joseph_covariance(&gain, &ss.h, p_hat.tensor(), &ss.r)?;
        let p = guard(symmetrize(&p)?, "kalman update", step)?;
        Ok(KalmanState { z, p: SpdMatrix::new(p)?, k: step })
    };
    run().map_err(|e| guard_err(e, "kalman update", step))
}

/// Output of [`run_filter`].
#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// Post-update states, `batch × d × m` (or `d × m`).
    pub z: Tensor,
    /// Post-update covariance of each step, shared across the batch.
    pub covariances: Vec<SpdMatrix>,
    /// Largest jitter applied to any predicted or updated covariance.
    pub max_jitter: f64,
}

/// Runs `m` predict/update cycles from `z0` (`batch × d × 1` or `d × 1`),
/// observing the columns of `x_hat_h` and driven by the columns of `u`.
pub fn run_filter(z0: &Tensor, p0: &SpdMatrix, u: Option<&Tensor>, x_hat_h: &Tensor, ss: &StateSpace) -> Result<FilterOutput> {
    let axis = x_hat_h.rank() - 1;
    let m = x_hat_h.shape()[axis];
    if z0.rank() != x_hat_h.rank() || z0.shape()[axis] != 1 || z0.shape()[..axis] != x_hat_h.shape()[..axis] {
        return Err(Error::shape(
            "run_filter",
            format!("z0 {:?} does not match observations {:?}", z0.shape(), x_hat_h.shape()),
        ));
    }
    if let Some(u) = u {
        if u.shape() != x_hat_h.shape() {
            return Err(Error::shape(
                "run_filter",
                format!("controls {:?} vs observations {:?}", u.shape(), x_hat_h.shape()),
            ));
        }
    }
    let mut state = KalmanState { z: z0.clone(), p: p0.clone(), k: 0 };
    let mut columns = Vec::with_capacity(m);
    let mut covariances = Vec::with_capacity(m);
    let mut max_jitter = p0.jitter_applied();
    for k in 0..m {
        let u_k = u.map(|u| u.slice(axis, k, k + 1)).transpose()?;
        let (z_hat, p_hat) = predict_step(&state, u_k.as_ref(), ss)?;
        let obs = x_hat_h.slice(axis, k, k + 1)?;
        state = update_step(&z_hat, &p_hat, &obs, ss, k + 1)?;
        max_jitter = max_jitter.max(p_hat.jitter_applied()).max(state.p.jitter_applied());
        columns.push(state.z.clone());
        covariances.push(state.p.clone());
    }
    let refs: Vec<&Tensor> = columns.iter().collect();
    Ok(FilterOutput { z: Tensor::concat(&refs, axis)?, covariances, max_jitter })
}

/// `Z' = Z + U`.
pub fn skip_connect(z: &Tensor, u: &Tensor) -> Result<Tensor> {
    if z.shape() != u.shape() {
        return Err(Error::shape("skip_connect", format!("{:?} vs {:?}", z.shape(), u.shape())));
    }
    z.add(u)
}
