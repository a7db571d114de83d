//! Multivariate series container, chronological splits, sliding windows and
//! synthetic generators.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tokenizer::{Normalization, WindowBatch};
use crate::Tensor;

/// Chronological split fractions; the test split takes the remainder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.7, val: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

/// `N` variables over `steps` time points, stored variable-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    values: Vec<f64>,
    n_vars: usize,
    steps: usize,
    pub names: Vec<String>,
    pub frequency: String,
    pub splits: SplitFractions,
}

impl SeriesDataset {
    /// `values[v * steps + t]`. Rejects non-finite entries, naming the first.
    pub fn new(names: Vec<String>, steps: usize, values: Vec<f64>) -> Result<SeriesDataset> {
        let n_vars = names.len();
        if n_vars == 0 || steps == 0 {
            return Err(Error::invalid("dataset needs at least one variable and one time step"));
        }
        if values.len() != n_vars * steps {
            return Err(Error::shape("dataset", format!("{} values for {n_vars} variables x {steps} steps", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value in variable {} at time index {}",
                names[i / steps],
                i % steps
            )));
        }
        Ok(SeriesDataset { values, n_vars, steps, names, frequency: String::new(), splits: SplitFractions::default() })
    }

    /// Builds from time-major rows (`rows[t][v]`).
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<SeriesDataset> {
        let n = names.len();
        let steps = rows.len();
        let mut values = vec![0.0; n * steps];
        for (t, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::shape("dataset", format!("row {t} has {} values, expected {n}", row.len())));
            }
            for (v, x) in row.iter().enumerate() {
                values[v * steps + t] = *x;
            }
        }
        Self::new(names, steps, values)
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn value(&self, var: usize, t: usize) -> f64 {
        self.values[var * self.steps + t]
    }

    pub fn variable(&self, var: usize) -> &[f64] {
        &self.values[var * self.steps..(var + 1) * self.steps]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Half-open time range of a split.
    pub fn split_range(&self, split: Split) -> Result<(usize, usize)> {
        let f = self.splits;
        if !(f.train > 0.0 && f.val >= 0.0 && f.train + f.val <= 1.0) {
            return Err(Error::invalid(format!("invalid split fractions {} / {}", f.train, f.val)));
        }
        let a = libm::round(f.train * self.steps as f64) as usize;
        let b = (libm::round((f.train + f.val) * self.steps as f64) as usize).min(self.steps);
        Ok(match split {
            Split::Train => (0, a),
            Split::Val => (a, b),
            Split::Test => (b, self.steps),
            Split::All => (0, self.steps),
        })
    }

    /// Per-variable mean and population std over a split.
    pub fn split_stats(&self, split: Split) -> Result<(Vec<f64>, Vec<f64>)> {
        let (a, b) = self.split_range(split)?;
        if b <= a {
            return Err(Error::invalid(format!("{} split is empty", split.name())));
        }
        let mut mean = Vec::with_capacity(self.n_vars);
        let mut std = Vec::with_capacity(self.n_vars);
        for v in 0..self.n_vars {
            let xs = &self.variable(v)[a..b];
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
            mean.push(m);
            std.push(libm::sqrt(var));
        }
        Ok((mean, std))
    }
}

/// Materialized sliding windows of one split.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub n_vars: usize,
    pub context_len: usize,
    pub horizon: usize,
    /// Absolute index of each window's first context step.
    pub starts: Vec<usize>,
    /// `N × T` per window, variable-major.
    pub contexts: Vec<Vec<f64>>,
    /// `N × L` per window, variable-major.
    pub targets: Vec<Vec<f64>>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn batch(&self, rows: &[usize], norm: &Normalization) -> Result<WindowBatch> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::invalid(format!("window {bad} out of range ({} windows)", self.len())));
        }
        let c: Vec<Vec<f64>> = rows.iter().map(|&r| self.contexts[r].clone()).collect();
        let t: Vec<Vec<f64>> = rows.iter().map(|&r| self.targets[r].clone()).collect();
        WindowBatch::from_windows_normalized(self.n_vars, &c, &t, norm)
    }
}

/// Context `[t, t+T)` and target `[t+T, t+T+L)` windows inside one split.
pub fn make_windows(ds: &SeriesDataset, context: usize, horizon: usize, stride: usize, split: Split) -> Result<WindowSet> {
    if context == 0 || horizon == 0 || stride == 0 {
        return Err(Error::invalid("context, horizon and stride must be positive"));
    }
    let (a, b) = ds.split_range(split)?;
    let len = b - a;
    if context + horizon > len {
        return Err(Error::invalid(format!(
            "{} split has {len} steps but a window needs T + L = {} + {} = {}",
            split.name(),
            context,
            horizon,
            context + horizon
        )));
    }
    let n = ds.n_vars();
    let mut set = WindowSet {
        n_vars: n,
        context_len: context,
        horizon,
        starts: Vec::new(),
        contexts: Vec::new(),
        targets: Vec::new(),
    };
    let mut t = a;
    while t + context + horizon <= b {
        let mut c = Vec::with_capacity(n * context);
        let mut y = Vec::with_capacity(n * horizon);
        for v in 0..n {
            let row = ds.variable(v);
            c.extend_from_slice(&row[t..t + context]);
            y.extend_from_slice(&row[t + context..t + context + horizon]);
        }
        set.starts.push(t);
        set.contexts.push(c);
        set.targets.push(y);
        t += stride;
    }
    Ok(set)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i}")).collect()
}

/// Settings of the linear-Gaussian generator.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianConfig {
    pub d_state: usize,
    pub n_vars: usize,
    pub steps: usize,
    /// Spectral radii of the state matrix are drawn from this range.
    pub radius: (f64, f64),
    pub process_noise: f64,
    pub obs_noise: f64,
    pub seed: u64,
}

impl LinearGaussianConfig {
    pub fn new(d_state: usize, n_vars: usize, steps: usize, seed: u64) -> Self {
        LinearGaussianConfig { d_state, n_vars, steps, radius: (0.95, 0.99), process_noise: 0.3, obs_noise: 0.1, seed }
    }
}

/// Generator parameters: `x_{t+1} = M x_t + w`, `y_t = C x_t + v` with
/// `w ~ N(0, Q)`, `v ~ N(0, R)`. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianParams {
    pub d_state: usize,
    pub n_vars: usize,
    pub m: Vec<f64>,
    pub q: Vec<f64>,
    pub c: Vec<f64>,
    pub r: Vec<f64>,
}

const BURN_IN: usize = 500;

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        for u in &cols {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = libm::sqrt(v.iter().map(|a| a * a).sum());
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut out = vec![0.0; d * d];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..d {
            out[i * d + j] = col[i];
        }
    }
    out
}

fn mat(d0: usize, d1: usize, v: &[f64]) -> Tensor {
    Tensor::new(&[d0, d1], v.to_vec()).expect("finite generator matrix")
}

/// Upper bound check on the spectral radius: `‖Mᵏ‖_F < 1` for some `k ≤ 512`.
fn is_stable(m: &Tensor) -> bool {
    let mut p = m.clone();
    for _ in 0..9 {
        let f: f64 = p.data().iter().map(|v| v * v).sum();
        if f < 1.0 {
            return true;
        }
        p = p.matmul(&p).expect("square");
    }
    false
}

/// Stable linear-Gaussian state-space series observed through a random readout.
pub fn synth_linear_gaussian(cfg: &LinearGaussianConfig) -> Result<(SeriesDataset, LinearGaussianParams)> {
    let (ds, n) = (cfg.d_state, cfg.n_vars);
    if ds == 0 || n == 0 || cfg.steps == 0 {
        return Err(Error::invalid("generator sizes must be positive"));
    }
    if !(0.0 <= cfg.radius.0 && cfg.radius.0 <= cfg.radius.1 && cfg.radius.1 < 1.0) {
        return Err(Error::invalid(format!("radius range {:?} must lie in [0, 1)", cfg.radius)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // block-diagonal scaled rotations in a random orthonormal basis
    let mut blocks = vec![0.0; ds * ds];
    let mut i = 0;
    while i < ds {
        let r = rng.random_range(cfg.radius.0..=cfg.radius.1);
        if i + 1 < ds {
            let th = rng.random_range(0.05..0.6);
            let (c, s) = (r * libm::cos(th), r * libm::sin(th));
            blocks[i * ds + i] = c;
            blocks[i * ds + i + 1] = -s;
            blocks[(i + 1) * ds + i] = s;
            blocks[(i + 1) * ds + i + 1] = c;
            i += 2;
        } else {
            blocks[i * ds + i] = r;
            i += 1;
        }
    }
    let o = mat(ds, ds, &random_orthogonal(&mut rng, ds));
    let m = o.matmul(&mat(ds, ds, &blocks))?.matmul(&o.transpose()?)?;
    if !is_stable(&m) {
        return Err(Error::invalid("generated state matrix failed the stability check"));
    }
    let c: Vec<f64> = (0..n * ds).map(|_| normal(&mut rng) / libm::sqrt(ds as f64)).collect();
    let params = LinearGaussianParams {
        d_state: ds,
        n_vars: n,
        m: m.data().to_vec(),
        q: diag(ds, cfg.process_noise * cfg.process_noise),
        c,
        r: diag(n, cfg.obs_noise * cfg.obs_noise),
    };
    let values = simulate_linear(&params, cfg.steps, cfg.process_noise, cfg.obs_noise, &mut rng);
    let mut data = SeriesDataset::new(default_names(n), cfg.steps, values)?;
    data.frequency = "synthetic".to_string();
    Ok((data, params))
}

fn diag(d: usize, v: f64) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        out[i * d + i] = v;
    }
    out
}

fn simulate_linear(p: &LinearGaussianParams, steps: usize, q_std: f64, r_std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (ds, n) = (p.d_state, p.n_vars);
    let mut x = vec![0.0; ds];
    let mut out = vec![0.0; n * steps];
    for t in 0..BURN_IN + steps {
        if t >= BURN_IN {
            for v in 0..n {
                let y: f64 = (0..ds).map(|j| p.c[v * ds + j] * x[j]).sum();
                out[v * steps + t - BURN_IN] = y + r_std * normal(rng);
            }
        }
        let next: Vec<f64> = (0..ds)
            .map(|i| (0..ds).map(|j| p.m[i * ds + j] * x[j]).sum::<f64>() + q_std * normal(rng))
            .collect();
        x = next;
    }
    out
}

/// Deterministic trajectory `x_{t+1} = M x_t` observed through `C` (no noise).
pub fn noiseless_linear(m: &[f64], c: &[f64], x0: &[f64], n_vars: usize, steps: usize) -> Result<SeriesDataset> {
    let d = x0.len();
    if m.len() != d * d || c.len() != n_vars * d {
        return Err(Error::shape("noiseless_linear", "matrix sizes do not match the state"));
    }
    let mut x = x0.to_vec();
    let mut values = vec![0.0; n_vars * steps];
    for t in 0..steps {
        for v in 0..n_vars {
            values[v * steps + t] = (0..d).map(|j| c[v * d + j] * x[j]).sum();
        }
        x = (0..d).map(|i| (0..d).map(|j| m[i * d + j] * x[j]).sum()).collect();
    }
    SeriesDataset::new(default_names(n_vars), steps, values)
}

/// Exact Gaussian predictive distribution of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianForecast {
    /// `N × L`, variable-major.
    pub mean: Vec<f64>,
    /// Marginal standard deviations, `N × L`.
    pub std: Vec<f64>,
}

impl LinearGaussianParams {
    fn tensors(&self) -> Result<[Tensor; 4]> {
        let (d, n) = (self.d_state, self.n_vars);
        Ok([mat(d, d, &self.m), mat(d, d, &self.q), mat(n, d, &self.c), mat(n, n, &self.r)])
    }

    /// Stationary state covariance, by fixed-point iteration.
    pub fn stationary_covariance(&self) -> Result<Tensor> {
        let [m, q, _, _] = self.tensors()?;
        let mut s = q.clone();
        for _ in 0..10_000 {
            let next = m.matmul(&s)?.matmul(&m.transpose()?)?.add(&q)?;
            let delta = next.data().iter().zip(s.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            s = next;
            if delta < 1e-14 {
                break;
            }
        }
        Ok(s)
    }

    /// Kalman filter over an `N × T` context (from the stationary prior),
    /// then `L`-step predictive marginals of the observations.
    pub fn predictive(&self, context: &[f64], horizon: usize) -> Result<GaussianForecast> {
        let (d, n) = (self.d_state, self.n_vars);
        if !context.len().is_multiple_of(n) || context.is_empty() {
            return Err(Error::shape("predictive", "context is not N × T"));
        }
        let t_len = context.len() / n;
        let [m, q, c, r] = self.tensors()?;
        let mut x = Tensor::zeros(&[d, 1]);
        let mut p = self.stationary_covariance()?;
        for t in 0..t_len {
            if t > 0 {
                x = m.matmul(&x)?;
                p = m.matmul(&p)?.matmul(&m.transpose()?)?.add(&q)?;
            }
            let y = Tensor::new(&[n, 1], (0..n).map(|v| context[v * t_len + t]).collect())?;
            let cp = c.matmul(&p)?;
            let s = cp.matmul(&c.transpose()?)?.add(&r)?;
            let s = s.add(&s.transpose()?)?.scale(0.5)?;
            let gain_t = s.solve_spd(&cp)?;
            x = x.add(&gain_t.transpose()?.matmul(&y.sub(&c.matmul(&x)?)?)?)?;
            p = p.sub(&gain_t.transpose()?.matmul(&cp)?)?;
            p = p.add(&p.transpose()?)?.scale(0.5)?;
        }
        let mut mean = vec![0.0; n * horizon];
        let mut std = vec![0.0; n * horizon];
        for h in 0..horizon {
            x = m.matmul(&x)?;
            p = m.matmul(&p)?.matmul(&m.transpose()?)?.add(&q)?;
            let y = c.matmul(&x)?;
            let s = c.matmul(&p)?.matmul(&c.transpose()?)?.add(&r)?;
            for v in 0..n {
                mean[v * horizon + h] = y.data()[v];
                std[v * horizon + h] = libm::sqrt(s.at(&[v, v]));
            }
        }
        Ok(GaussianForecast { mean, std })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NonlinearKind {
    /// Van der Pol oscillator `x'' − μ(1 − x²)x' + x = 0`, explicit Euler.
    VanDerPol { mu: f64, dt: f64 },
    /// Sum of sinusoids with periods 24, 12 and 8 plus a random-walk drift
    /// whose step size is the noise level.
    SineMixtureDrift,
}

/// Period of the noiseless sine mixture.
pub const SINE_MIXTURE_PERIOD: usize = 24;

/// Nonlinear synthetic series. Every channel is a random combination of the
/// latent signal, plus `noise`-scaled Gaussian observation noise.
pub fn synth_nonlinear(kind: NonlinearKind, n_vars: usize, steps: usize, noise: f64, seed: u64) -> Result<SeriesDataset> {
    if n_vars == 0 || steps == 0 {
        return Err(Error::invalid("generator sizes must be positive"));
    }
    if !(noise >= 0.0) {
        return Err(Error::invalid(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; n_vars * steps];
    match kind {
        NonlinearKind::VanDerPol { mu, dt } => {
            let (mut x, mut v) = (rng.random_range(0.5..2.0), 0.0);
            let mix: Vec<(f64, f64)> = (0..n_vars).map(|_| (normal(&mut rng), normal(&mut rng))).collect();
            for t in 0..steps {
                for (c, (a, b)) in mix.iter().enumerate() {
                    values[c * steps + t] = a * x + b * v + noise * normal(&mut rng);
                }
                let (nx, nv) = vanderpol_euler(x, v, mu, dt);
                x = nx;
                v = nv;
            }
        }
        NonlinearKind::SineMixtureDrift => {
            let periods = [24.0, 12.0, 8.0];
            let comps: Vec<[(f64, f64); 3]> = (0..n_vars)
                .map(|_| core::array::from_fn(|_| (rng.random_range(0.3..1.5), rng.random_range(0.0..2.0 * PI))))
                .collect();
            for (c, comp) in comps.iter().enumerate() {
                let mut drift = 0.0;
                for t in 0..steps {
                    let s: f64 = comp
                        .iter()
                        .zip(periods)
                        .map(|((a, ph), p)| a * libm::sin(2.0 * PI * (t % SINE_MIXTURE_PERIOD) as f64 / p + ph))
                        .sum();
                    values[c * steps + t] = s + drift + noise * normal(&mut rng);
                    drift += noise * normal(&mut rng);
                }
            }
        }
    }
    let mut ds = SeriesDataset::new(default_names(n_vars), steps, values)?;
    ds.frequency = "synthetic".to_string();
    Ok(ds)
}

/// One explicit Euler step of the Van der Pol system.
pub fn vanderpol_euler(x: f64, v: f64, mu: f64, dt: f64) -> (f64, f64) {
    (x + dt * v, v + dt * (mu * (1.0 - x * x) * v - x))
}
