//! Numerical property checks shared by `koopkal selftest` and the
//! acceptance tests.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use koopkal_core::kalman::{
    joseph_covariance, kalman_gain, naive_covariance, predict_step, run_filter, update_step, KalmanParams, KalmanState,
    StateSpace,
};
use koopkal_core::koopman::{fit_local_operator, rollout};
use koopkal_core::linalg::{is_positive_definite, SpdMatrix};
use koopkal_core::metrics::{crps_empirical, crps_sorted};
use koopkal_core::model::{forward_pass, posterior_noise, HyperParams, ModelBundle};
use koopkal_core::params::{gaussian, ParamSet, ParamStore};
use koopkal_core::tensor::gradcheck::finite_difference_check;
use koopkal_core::tokenizer::WindowBatch;
use koopkal_core::vae::{kl_to_standard_normal, VariationalPosterior};
use koopkal_core::{Result, Tensor};

/// Outcome of one check: the worst observed value against its bound.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub worst: f64,
    pub bound: f64,
    pub detail: String,
    pub elapsed: Duration,
}

impl Check {
    fn from_worst(name: &'static str, worst: f64, bound: f64, detail: String, start: Instant) -> Check {
        Check { name, passed: worst <= bound, worst, bound, detail, elapsed: start.elapsed() }
    }

    fn failed(name: &'static str, err: impl std::fmt::Display, start: Instant) -> Check {
        Check {
            name,
            passed: false,
            worst: f64::NAN,
            bound: f64::NAN,
            detail: format!("error: {err}"),
            elapsed: start.elapsed(),
        }
    }
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("finite test data")
}

fn frob(a: &Tensor) -> f64 {
    a.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `G Gᵀ + floor·I` with a Gaussian `G`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, d: usize, floor: f64) -> Tensor {
    let g = t(&[d, d], gaussian(rng, d * d, 1.0));
    g.matmul(&g.transpose().unwrap()).unwrap().add(&Tensor::eye(d).scale(floor).unwrap()).unwrap()
}

/// Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v = gaussian(rng, d, 1.0);
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let mut m = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            m[i * d + j] = c[i];
        }
    }
    m
}

/// Joseph update against `(I − KH)P̂` on random SPD `(P̂, R)` and random `H`
/// with `d ≤ 8`. `flip_sign` feeds `−K` to the Joseph form (fault injection).
pub fn joseph_equivalence(cases: usize, seed: u64, flip_sign: bool) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let run = |rng: &mut ChaCha8Rng, worst: &mut f64| -> Result<()> {
        for case in 0..cases {
            let d = 1 + case % 8;
            let p_hat = SpdMatrix::new(random_spd(rng, d, 0.1))?;
            let r = random_spd(rng, d, 0.1);
            let h = t(&[d, d], gaussian(rng, d * d, 1.0));
            let gain = kalman_gain(&p_hat, &h, &r)?;
            let fed = if flip_sign { gain.neg()? } else { gain.clone() };
            let joseph = joseph_covariance(&fed, &h, p_hat.tensor(), &r)?;
            let naive = naive_covariance(&gain, &h, p_hat.tensor())?;
            *worst = worst.max(frob(&joseph.sub(&naive)?) / frob(p_hat.tensor()));
        }
        Ok(())
    };
    match run(&mut rng, &mut worst) {
        Ok(()) => Check::from_worst("joseph equivalence", worst, 1e-10, format!("{cases} cases, d <= 8"), start),
        Err(e) => Check::failed("joseph equivalence", e, start),
    }
}

/// Long predict/update run with random parameters; `worst` counts steps
/// that lost definiteness or needed jitter.
pub fn pd_retention(cycles: usize, d: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |rng: &mut ChaCha8Rng| -> Result<(usize, f64)> {
        let mut store = ParamStore::new();
        KalmanParams::init(&mut store, d)?;
        for name in [KalmanParams::A, KalmanParams::H, KalmanParams::LQ, KalmanParams::LR] {
            store.set(name, gaussian(rng, d * d, 0.4))?;
        }
        let ss = KalmanParams::resolve(&store.bind(false)?)?;
        let mut state = KalmanState { z: Tensor::zeros(&[d, 1]), p: SpdMatrix::new(Tensor::eye(d))?, k: 0 };
        let (mut bad, mut jitter) = (0, 0.0_f64);
        for k in 0..cycles {
            let u = t(&[d, 1], gaussian(rng, d, 1.0));
            let (zh, ph) = predict_step(&state, Some(&u), &ss)?;
            let obs = t(&[d, 1], gaussian(rng, d, 1.0));
            state = update_step(&zh, &ph, &obs, &ss, k + 1)?;
            jitter = jitter.max(ph.jitter_applied()).max(state.p.jitter_applied());
            if !is_positive_definite(state.p.tensor(), 0.0).positive_definite || ph.jitter_applied() > 0.0 || state.p.jitter_applied() > 0.0 {
                bad += 1;
            }
        }
        Ok((bad, jitter))
    };
    match run(&mut rng) {
        Ok((bad, jitter)) => Check::from_worst(
            "pd retention",
            bad as f64,
            0.0,
            format!("{cycles} cycles, d = {d}, max jitter {jitter:e}"),
            start,
        ),
        Err(e) => Check::failed("pd retention", e, start),
    }
}

/// With `H = I`, `A = 0`, tiny `R` and no control, the filter reproduces the
/// Koopman horizon rollout. Reports the largest absolute deviation.
pub fn degenerate_filter(instances: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |rng: &mut ChaCha8Rng| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let d = 1 + i % 8;
            let (n, m) = (2 + i % 4, 1 + i % 6);
            let r_diag = 1e-12 * rng.random_range(0.01..=1.0);
            let q = random_spd(rng, d, 0.1);
            let ss = StateSpace {
                a: Tensor::zeros(&[d, d]),
                b: Tensor::eye(d),
                h: Tensor::eye(d),
                q,
                r: Tensor::eye(d).scale(r_diag)?,
            };
            let scale = rng.random_range(0.8..=1.05);
            let k = t(&[d, d], random_orthogonal(rng, d)).scale(scale)?;
            let x1 = t(&[d], gaussian(rng, d, 1.0));
            let (ctx, horizon) = rollout(&k, &x1, n, m)?;
            let z0 = ctx.slice(1, n - 1, n)?;
            let out = run_filter(&z0, &SpdMatrix::new(Tensor::eye(d))?, None, &horizon, &ss)?;
            for (a, b) in out.z.data().iter().zip(horizon.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    };
    match run(&mut rng) {
        Ok(w) => Check::from_worst("degenerate filter = rollout", w, 1e-6, format!("{instances} instances"), start),
        Err(e) => Check::failed("degenerate filter = rollout", e, start),
    }
}

/// Local operator fitted on exact linear trajectories against the generator,
/// relative Frobenius error, `d ≤ 10`, `n ≥ d + 1`.
pub fn edmd_recovery(instances: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |rng: &mut ChaCha8Rng| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let d = 1 + i % 10;
            let n = d + 1 + i % 3;
            let scale = rng.random_range(0.9..=1.0);
            let k = t(&[d, d], random_orthogonal(rng, d)).scale(scale)?;
            let x1 = t(&[d], gaussian(rng, d, 1.0));
            let (traj, _) = rollout(&k, &x1, n, 1)?;
            let fitted = fit_local_operator(&traj.reshape(&[1, d, n])?, 0.0)?.reshape(&[d, d])?;
            worst = worst.max(frob(&fitted.sub(&k)?) / frob(&k));
        }
        Ok(worst)
    };
    match run(&mut rng) {
        Ok(w) => Check::from_worst("edmd recovery", w, 1e-6, format!("{instances} systems, d <= 10"), start),
        Err(e) => Check::failed("edmd recovery", e, start),
    }
}

/// Reverse-mode gradient of the full training loss against central
/// differences on `N=2, T=8, L=8, s=4, d=6`, at a perturbed point.
pub fn full_gradient(seed: u64, tol: f64) -> Check {
    let start = Instant::now();
    let run = || -> Result<(f64, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hp = HyperParams::new(2, 8, 8, 4, 6);
        let bundle = ModelBundle::init(hp.clone(), seed)?;
        let ctx: Vec<Vec<f64>> = (0..2).map(|_| gaussian(&mut rng, 16, 1.0)).collect();
        let tgt: Vec<Vec<f64>> = (0..2).map(|_| gaussian(&mut rng, 16, 1.0)).collect();
        let batch = WindowBatch::from_windows(2, &ctx, &tgt)?;
        let eps = posterior_noise(&mut rng, &hp, 2)?;
        let names = bundle.params.names();
        let values: Vec<Tensor> = bundle
            .params
            .iter()
            .map(|p| {
                let noise = gaussian(&mut rng, p.data.len(), 0.1);
                t(&p.shape, p.data.iter().zip(noise).map(|(a, b)| a + b).collect())
            })
            .collect();
        let f = |vals: &[Tensor]| Ok(forward_pass(&ParamSet::with_names(&names, vals.to_vec()), &hp, &batch, &eps)?.loss.total);
        let report = finite_difference_check(f, &values, 1e-6, tol)?;
        let worst = report.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).expect("params");
        Ok((report.max_rel_err(), format!("{} tensors, worst {}", names.len(), names[worst.index])))
    };
    match run() {
        Ok((w, detail)) => Check::from_worst("full-loss gradients", w, tol, detail, start),
        Err(e) => Check::failed("full-loss gradients", e, start),
    }
}

/// `∫ (F̂(z) − 1{x ≤ z})² dz` with a midpoint rule whose grid contains every
/// jump point.
pub fn grid_crps(samples: &[f64], x: f64, cells: usize) -> f64 {
    let lo = samples.iter().cloned().fold(x, f64::min) - 1.0;
    let hi = samples.iter().cloned().fold(x, f64::max) + 1.0;
    let mut grid: Vec<f64> = (0..=cells).map(|i| lo + (hi - lo) * i as f64 / cells as f64).collect();
    grid.extend_from_slice(samples);
    grid.push(x);
    grid.sort_by(f64::total_cmp);
    let s = samples.len() as f64;
    let mut acc = 0.0;
    for w in grid.windows(2) {
        let z = 0.5 * (w[0] + w[1]);
        let f = samples.iter().filter(|&&v| v <= z).count() as f64 / s;
        let step = if x <= z { 1.0 } else { 0.0 };
        acc += (f - step) * (f - step) * (w[1] - w[0]);
    }
    acc
}

/// Pairwise CRPS against grid integration and the sorted form, plus the
/// two-point example. Reports the largest deviation.
pub fn crps_oracle(cases: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |rng: &mut ChaCha8Rng| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for case in 0..cases {
            let s = 2 + case % 9;
            let spread = rng.random_range(0.2..=3.0);
            let xs = gaussian(rng, s, spread);
            let x = gaussian(rng, 1, 1.5)[0];
            let pair = crps_empirical(&xs, x)?;
            worst = worst.max((pair - grid_crps(&xs, x, 2000)).abs());
            worst = worst.max((pair - crps_sorted(&xs, x)?).abs());
        }
        Ok(worst.max((crps_empirical(&[0.0, 1.0], 0.5)? - 0.25).abs()))
    };
    match run(&mut rng) {
        Ok(w) => Check::from_worst("crps oracle", w, 1e-6, format!("{cases} sample sets"), start),
        Err(e) => Check::failed("crps oracle", e, start),
    }
}

/// Closed-form KL to `N(0, I)` against a Monte-Carlo estimate of
/// `E_q[log q − log p]`; `worst` is the largest deviation in standard errors.
/// Signed deviation of the closed-form KL from a Monte-Carlo estimate, in
/// estimated standard errors, for `cases` random posteriors with d <= 4.
pub fn kl_z_scores(cases: usize, draws: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    for case in 0..cases {
        let d = 1 + case % 4;
        let p = random_spd(&mut rng, d, 0.2).scale(rng.random_range(0.2..=1.0))?;
        let z = gaussian(&mut rng, d, 1.0);
        let post = VariationalPosterior::new(t(&[1, d, 1], z.clone()), vec![SpdMatrix::new(p.clone())?])?;
        let exact = kl_to_standard_normal(&post)?.item();
        let l = p.cholesky_lower()?;
        let log_det: f64 = (0..d).map(|i| 2.0 * l.at(&[i, i]).ln()).sum();
        let (mut s1, mut s2) = (0.0, 0.0);
        let mut x = vec![0.0; d];
        for _ in 0..draws {
            let eps = gaussian(&mut rng, d, 1.0);
            for i in 0..d {
                x[i] = z[i] + (0..=i).map(|j| l.at(&[i, j]) * eps[j]).sum::<f64>();
            }
            let lq = -0.5 * log_det - 0.5 * eps.iter().map(|e| e * e).sum::<f64>();
            let lp = -0.5 * x.iter().map(|v| v * v).sum::<f64>();
            s1 += lq - lp;
            s2 += (lq - lp) * (lq - lp);
        }
        let n = draws as f64;
        let mean = s1 / n;
        let se = ((s2 / n - mean * mean) / n).sqrt();
        out.push((mean - exact) / se);
    }
    Ok(out)
}

pub fn kl_monte_carlo(cases: usize, draws: usize, seed: u64) -> Check {
    let start = Instant::now();
    match kl_z_scores(cases, draws, seed) {
        Ok(z) => {
            let w = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            Check::from_worst("kl monte carlo", w, 3.0, format!("{cases} posteriors, {draws} draws, in standard errors"), start)
        }
        Err(e) => Check::failed("kl monte carlo", e, start),
    }
}

/// Test hooks for `selftest`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Faults {
    pub joseph_sign_flip: bool,
}

pub fn run_all(faults: Faults) -> Vec<Check> {
    vec![
        joseph_equivalence(1000, 1, faults.joseph_sign_flip),
        edmd_recovery(100, 2),
        full_gradient(3, 1e-3),
        crps_oracle(200, 4),
        pd_retention(10_000, 8, 5),
    ]
}

pub fn format_table(checks: &[Check]) -> String {
    let mut out = format!("{:<30} {:<6} {:>12} {:>10} {:>9}  detail\n", "check", "result", "worst", "bound", "seconds");
    for c in checks {
        out.push_str(&format!(
            "{:<30} {:<6} {:>12.3e} {:>10.1e} {:>9.2}  {}\n",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.worst,
            c.bound,
            c.elapsed.as_secs_f64(),
            c.detail
        ));
    }
    out
}
