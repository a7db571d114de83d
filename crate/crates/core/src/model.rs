//! The full forecasting model: parameter bundle, forward pass and sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kalman::{run_filter, skip_connect, IntegratorNet, KalmanParams};
use crate::koopman::{fit_local_operator, measure, rollout, KoopmanOperator, MeasurementMlp, OperatorMode};
use crate::linalg::{SpdMatrix, DEFAULT_RIDGE};
use crate::metrics::SampleForecast;
use crate::params::{gaussian, glorot, ParamSet, ParamStore};
use crate::tokenizer::{embed, patchify, Normalization, WindowBatch};
use crate::vae::{decode, reconstruct_context, resample, total_loss, DecoderHeads, LossBreakdown, LossInputs, VariationalPosterior};
use crate::Tensor;

/// How each window is standardized before tokenization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Per-window statistics of the context.
    Instance,
    /// Training-split statistics shared by every window.
    Global,
    /// No rescaling.
    None,
}

impl NormMode {
    pub fn name(self) -> &'static str {
        match self {
            NormMode::Instance => "instance",
            NormMode::Global => "global",
            NormMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<NormMode> {
        match s {
            "instance" => Ok(NormMode::Instance),
            "global" => Ok(NormMode::Global),
            "none" => Ok(NormMode::None),
            _ => Err(Error::invalid(format!("unknown normalization {s:?} (instance, global, none)"))),
        }
    }
}

/// Architecture switches used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub operator: OperatorMode,
    /// Residual integrator producing `U`; without it `U = 0`.
    pub integrator: bool,
    /// `Z' = Z + U`.
    pub skip: bool,
    /// `B u_k` in the predict step.
    pub control: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Variant { operator: OperatorMode::Mixed, integrator: true, skip: true, control: true }
    }
}

impl Variant {
    pub fn name(&self) -> String {
        let op = match self.operator {
            OperatorMode::Mixed => "mixed",
            OperatorMode::LocalOnly => "local",
            OperatorMode::GlobalOnly => "global",
        };
        format!("{op}{}{}{}", if self.integrator { "" } else { "-nointegrator" }, if self.skip { "" } else { "-noskip" }, if self.control { "" } else { "-nocontrol" })
    }

    fn uses_control(&self) -> bool {
        self.integrator && self.control
    }
}

/// Model and optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub n_vars: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub patch: usize,
    pub d_model: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub beta_kl: f64,
    pub lambda_rec: f64,
    pub lambda_ridge: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    pub val_samples: usize,
    pub norm: NormMode,
    pub variant: Variant,
}

impl HyperParams {
    pub fn new(n_vars: usize, context_len: usize, horizon: usize, patch: usize, d_model: usize) -> Self {
        HyperParams {
            n_vars,
            context_len,
            horizon,
            patch,
            d_model,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            beta_kl: 1.0,
            lambda_rec: 1.0,
            lambda_ridge: DEFAULT_RIDGE,
            batch_size: 32,
            epochs: 100,
            grad_clip: 5.0,
            val_samples: 32,
            norm: NormMode::Instance,
            variant: Variant::default(),
        }
    }

    /// Context tokens `n = T / s`.
    pub fn n_tokens(&self) -> usize {
        self.context_len / self.patch
    }

    /// Horizon tokens `m = L / s`.
    pub fn m_tokens(&self) -> usize {
        self.horizon / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("n_vars", self.n_vars),
            ("context_len", self.context_len),
            ("horizon", self.horizon),
            ("patch", self.patch),
            ("d_model", self.d_model),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !self.context_len.is_multiple_of(self.patch) {
            return Err(Error::Divisibility { len: self.context_len, patch: self.patch });
        }
        if !self.horizon.is_multiple_of(self.patch) {
            return Err(Error::Divisibility { len: self.horizon, patch: self.patch });
        }
        if self.variant.operator != OperatorMode::GlobalOnly && self.n_tokens() < 2 {
            return Err(Error::invalid("the local operator needs at least 2 context tokens (T / s >= 2)"));
        }
        let nonneg = [("beta_kl", self.beta_kl), ("lambda_rec", self.lambda_rec), ("lambda_ridge", self.lambda_ridge)];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("optimizer settings need lr > 0, 0 <= beta1, beta2 < 1 and eps > 0"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::invalid(format!("grad_clip must be > 0, got {}", self.grad_clip)));
        }
        if self.val_samples < 2 {
            return Err(Error::invalid("val_samples must be at least 2"));
        }
        Ok(())
    }
}

/// Hyperparameters, learnable tensors and fixed normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub hp: HyperParams,
    pub params: ParamStore,
    /// Per-variable statistics for [`NormMode::Global`].
    pub norm_stats: Option<(Vec<f64>, Vec<f64>)>,
}

pub const EMBED_WEIGHT: &str = "embed.weight";
pub const EMBED_BIAS: &str = "embed.bias";

impl ModelBundle {
    pub fn init(hp: HyperParams, seed: u64) -> Result<ModelBundle> {
        hp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, flat) = (hp.d_model, hp.n_vars * hp.patch);
        let mut store = ParamStore::new();
        store.insert(EMBED_WEIGHT, &[d, flat], glorot(&mut rng, flat, d, 1.0))?;
        store.insert(EMBED_BIAS, &[d], vec![0.0; d])?;
        MeasurementMlp::init(&mut store, &mut rng, d)?;
        if hp.variant.operator != OperatorMode::LocalOnly {
            KoopmanOperator::init(&mut store, d)?;
        }
        if hp.variant.integrator {
            IntegratorNet::init(&mut store, &mut rng, d, hp.n_tokens(), hp.m_tokens())?;
        }
        KalmanParams::init(&mut store, d)?;
        if !hp.variant.uses_control() {
            // no control path: B never enters the graph
            store = without(store, KalmanParams::B)?;
        }
        DecoderHeads::init(&mut store, &mut rng, d, hp.n_vars, hp.patch)?;
        Ok(ModelBundle { hp, params: store, norm_stats: None })
    }

    pub fn normalization(&self) -> Result<Normalization> {
        match self.hp.norm {
            NormMode::Instance => Ok(Normalization::Instance),
            NormMode::None => Ok(Normalization::none(self.hp.n_vars)),
            NormMode::Global => {
                let (mean, std) = self
                    .norm_stats
                    .clone()
                    .ok_or_else(|| Error::invalid("global normalization needs training statistics"))?;
                Ok(Normalization::Fixed { mean, std })
            }
        }
    }

    pub fn check_batch(&self, batch: &WindowBatch) -> Result<()> {
        let hp = &self.hp;
        if batch.n_vars() != hp.n_vars || batch.context_len() != hp.context_len || batch.horizon() != hp.horizon {
            return Err(Error::shape(
                "forward_pass",
                format!(
                    "batch N={}, T={}, L={} does not match model N={}, T={}, L={}",
                    batch.n_vars(),
                    batch.context_len(),
                    batch.horizon(),
                    hp.n_vars,
                    hp.context_len,
                    hp.horizon
                ),
            ));
        }
        Ok(())
    }
}

fn without(store: ParamStore, name: &str) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for p in store.iter().filter(|p| p.name != name) {
        out.insert(&p.name, &p.shape, p.data.clone())?;
    }
    Ok(out)
}

/// Posterior over the horizon tokens plus the deterministic pieces needed by
/// the losses and diagnostics.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub posterior: VariationalPosterior,
    /// Koopman reconstruction of the context tokens, `batch × d × n`.
    pub x_hat_c: Tensor,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics {
    /// Mean over the batch of `‖U‖_F`.
    pub u_norm: f64,
    /// Mean over the batch of a spectral-radius estimate of the operator.
    pub k_spectral: f64,
    /// Largest covariance jitter applied inside the filter.
    pub max_jitter: f64,
}

/// Gelfand estimate `‖K^k‖_F^{1/k}` with `k = 32`, averaged over the batch.
pub fn spectral_estimate(k: &Tensor) -> f64 {
    let d = *k.shape().last().expect("square");
    let nb = k.numel() / (d * d);
    let mut total = 0.0;
    for b in 0..nb {
        let mut p = Tensor::new(&[d, d], k.data()[b * d * d..(b + 1) * d * d].to_vec()).expect("finite");
        let mut log_scale = 0.0;
        for _ in 0..5 {
            let f = libm::sqrt(p.data().iter().map(|v| v * v).sum::<f64>());
            if !(f > 0.0) || !f.is_finite() {
                return if f == 0.0 { 0.0 } else { f64::INFINITY };
            }
            // renormalize to keep powers finite
            p = p.scale(1.0 / f).expect("finite");
            log_scale = 2.0 * (log_scale + libm::log(f));
            p = p.matmul(&p).expect("square");
        }
        let f = libm::sqrt(p.data().iter().map(|v| v * v).sum::<f64>());
        total += libm::exp((log_scale + libm::log(f.max(1e-300))) / 32.0);
    }
    total / nb as f64
}

/// Everything up to the variational posterior.
pub fn encode(ps: &ParamSet, hp: &HyperParams, batch: &WindowBatch) -> Result<Encoded> {
    let (n, m) = (hp.n_tokens(), hp.m_tokens());
    let variant = hp.variant;
    let x = batch.standardized_context().map_err(|e| e.in_stage("normalize"))?;
    let tokens = (|| embed(&patchify(&x, hp.patch)?, ps.get(EMBED_WEIGHT)?, ps.get(EMBED_BIAS)?))()
        .map_err(|e| e.in_stage("embed"))?;
    let psi = MeasurementMlp::load(ps)?;
    let x_star = measure(&psi, &tokens).map_err(|e| e.in_stage("measure"))?;
    let op = KoopmanOperator::fit(ps, &x_star, hp.lambda_ridge, variant.operator).map_err(|e| e.in_stage("koopman"))?;
    let k = op.effective()?;
    let (x_hat_c, x_hat_h) = rollout(&k, &x_star.slice(2, 0, 1)?, n, m).map_err(|e| e.in_stage("rollout"))?;
    let u = if variant.integrator {
        let net = IntegratorNet::load(ps)?;
        Some(net.forward(&x_star.sub(&x_hat_c)?).map_err(|e| e.in_stage("integrator"))?)
    } else {
        None
    };
    let ss = KalmanParams::resolve(ps)?;
    let p0 = SpdMatrix::new(Tensor::eye(hp.d_model))?;
    let control = if variant.uses_control() { u.as_ref() } else { None };
    let filtered = run_filter(&x_star.slice(2, n - 1, n)?, &p0, control, &x_hat_h, &ss).map_err(|e| e.in_stage("kalman"))?;
    let z_prime = match (&u, variant.skip) {
        (Some(u), true) => skip_connect(&filtered.z, u)?,
        _ => filtered.z.clone(),
    };
    let u_norm = match &u {
        Some(u) => {
            let per = u.numel() / batch.batch_size();
            u.data().chunks(per).map(|c| libm::sqrt(c.iter().map(|v| v * v).sum::<f64>())).sum::<f64>()
                / batch.batch_size() as f64
        }
        None => 0.0,
    };
    let diagnostics = Diagnostics { u_norm, k_spectral: spectral_estimate(&k), max_jitter: filtered.max_jitter };
    Ok(Encoded { posterior: VariationalPosterior::new(z_prime, filtered.covariances)?, x_hat_c, diagnostics })
}

/// Result of one training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: LossBreakdown,
    /// Predictive mean and scale, `batch × N × L`, original scale.
    pub mu: Tensor,
    pub sigma: Tensor,
    pub diagnostics: Diagnostics,
}

/// Full pass with externally supplied posterior noise `batch × d × m`.
pub fn forward_pass(ps: &ParamSet, hp: &HyperParams, batch: &WindowBatch, eps: &Tensor) -> Result<ForwardOutput> {
    let enc = encode(ps, hp, batch)?;
    let heads = DecoderHeads::load(ps, hp.n_vars, hp.patch)?;
    let z = resample(&enc.posterior, eps).map_err(|e| e.in_stage("resample"))?;
    let (mu, sigma) = decode(&heads, &z, batch).map_err(|e| e.in_stage("decode"))?;
    let x_rec = reconstruct_context(&heads, &enc.x_hat_c, batch).map_err(|e| e.in_stage("reconstruct"))?;
    let inputs = LossInputs {
        target: &batch.target,
        mu: &mu,
        sigma: &sigma,
        posterior: &enc.posterior,
        context: &batch.context,
        reconstruction: &x_rec,
    };
    let loss = total_loss(&inputs, hp.beta_kl, hp.lambda_rec).map_err(|e| e.in_stage("loss"))?;
    Ok(ForwardOutput { loss, mu, sigma, diagnostics: enc.diagnostics })
}

/// Posterior noise for one batch.
pub fn posterior_noise<R: Rng + ?Sized>(rng: &mut R, hp: &HyperParams, batch_size: usize) -> Result<Tensor> {
    let shape = [batch_size, hp.d_model, hp.m_tokens()];
    Tensor::new(&shape, gaussian(rng, shape.iter().product(), 1.0))
}

/// Sample paths for every window of a batch.
#[derive(Debug, Clone)]
pub struct ForecastDistribution {
    /// `batch × S × N × L`, row-major.
    pub paths: Vec<f64>,
    pub batch: usize,
    pub n_samples: usize,
    pub n_vars: usize,
    pub horizon: usize,
}

impl ForecastDistribution {
    /// Samples of window `b` scored against `observation` (`N × L`).
    pub fn window(&self, b: usize, observation: Vec<f64>) -> Result<SampleForecast> {
        let per = self.n_samples * self.n_vars * self.horizon;
        SampleForecast::new(self.paths[b * per..(b + 1) * per].to_vec(), observation, self.n_samples, self.n_vars, self.horizon)
    }
}

/// Draws `S` forecast paths per window: latent posterior draw, then
/// `y = μ + σ ξ` per coordinate. The encoder runs once per batch.
pub fn sample_forecasts<R: Rng + ?Sized>(bundle: &ModelBundle, batch: &WindowBatch, n_samples: usize, rng: &mut R) -> Result<ForecastDistribution> {
    if n_samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    bundle.check_batch(batch)?;
    let hp = &bundle.hp;
    let ps = bundle.params.bind(false)?;
    let enc = encode(&ps, hp, batch)?;
    let heads = DecoderHeads::load(&ps, hp.n_vars, hp.patch)?;
    let (b, nl) = (batch.batch_size(), hp.n_vars * hp.horizon);
    let mut paths = vec![0.0; b * n_samples * nl];
    for s in 0..n_samples {
        let eps = posterior_noise(rng, hp, b)?;
        let z = resample(&enc.posterior, &eps)?;
        let (mu, sigma) = decode(&heads, &z, batch)?;
        let xi = gaussian(rng, b * nl, 1.0);
        for w in 0..b {
            let dst = (w * n_samples + s) * nl;
            for i in 0..nl {
                let j = w * nl + i;
                paths[dst + i] = mu.data()[j] + sigma.data()[j] * xi[j];
            }
        }
    }
    Ok(ForecastDistribution { paths, batch: b, n_samples, n_vars: hp.n_vars, horizon: hp.horizon })
}

/// Local operator of each window's measured tokens, for inspection.
pub fn local_operators(bundle: &ModelBundle, batch: &WindowBatch) -> Result<Tensor> {
    let hp = &bundle.hp;
    let ps = bundle.params.bind(false)?;
    let x = batch.standardized_context()?;
    let tokens = embed(&patchify(&x, hp.patch)?, ps.get(EMBED_WEIGHT)?, ps.get(EMBED_BIAS)?)?;
    fit_local_operator(&measure(&MeasurementMlp::load(&ps)?, &tokens)?, hp.lambda_ridge)
}
