//! Variational posterior over the horizon tokens, decoder heads and the
//! training losses.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, SpdMatrix};
use crate::nn::{SkipKind, TanhMlp};
use crate::params::{ParamSet, ParamStore};
use crate::tokenizer::{unpatchify, WindowBatch};
use crate::Tensor;

pub const SIGMA_FLOOR: f64 = 1e-6;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Gaussian posterior with means `batch × d × m` and one covariance per
/// token. Covariances are `d × d` (shared by the batch) or `batch × d × d`.
#[derive(Debug, Clone)]
pub struct VariationalPosterior {
    pub mean: Tensor,
    pub covariances: Vec<SpdMatrix>,
}

impl VariationalPosterior {
    pub fn new(mean: Tensor, covariances: Vec<SpdMatrix>) -> Result<VariationalPosterior> {
        let [_, d, m] = *mean.shape() else {
            return Err(Error::shape("posterior", format!("mean must be batch×d×m, got {:?}", mean.shape())));
        };
        if covariances.len() != m || covariances.iter().any(|p| p.dim() != d) {
            return Err(Error::shape(
                "posterior",
                format!("expected {m} covariances of size {d}, got {}", covariances.len()),
            ));
        }
        Ok(VariationalPosterior { mean, covariances })
    }

    pub fn tokens(&self) -> usize {
        self.covariances.len()
    }
}

/// `z_k = z'_k + chol(P_k) ε_k` for every token.
pub fn resample(post: &VariationalPosterior, eps: &Tensor) -> Result<Tensor> {
    if eps.shape() != post.mean.shape() {
        return Err(Error::shape("resample", format!("noise {:?} vs mean {:?}", eps.shape(), post.mean.shape())));
    }
    let mut cols = Vec::with_capacity(post.tokens());
    for (k, p) in post.covariances.iter().enumerate() {
        cols.push(cholesky(p)?.matmul(&eps.slice(2, k, k + 1)?)?);
    }
    let refs: Vec<&Tensor> = cols.iter().collect();
    post.mean.add(&Tensor::concat(&refs, 2)?)
}

/// Mean and scale decoder heads, each `d → 2d → 2d → N·s` per token with a
/// linear skip path.
#[derive(Debug, Clone)]
pub struct DecoderHeads {
    mu: TanhMlp,
    sigma: TanhMlp,
    n_vars: usize,
    patch: usize,
}

impl DecoderHeads {
    pub const MU: &'static str = "dec_mu";
    pub const SIGMA: &'static str = "dec_sigma";

    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, d: usize, n_vars: usize, patch: usize) -> Result<()> {
        TanhMlp::init(store, rng, Self::MU, d, 2 * d, n_vars * patch, 1.0, SkipKind::Linear)?;
        TanhMlp::init(store, rng, Self::SIGMA, d, 2 * d, n_vars * patch, 1.0, SkipKind::None)
    }

    pub fn load(ps: &ParamSet, n_vars: usize, patch: usize) -> Result<DecoderHeads> {
        Ok(DecoderHeads {
            mu: TanhMlp::load(ps, Self::MU, SkipKind::Linear)?,
            sigma: TanhMlp::load(ps, Self::SIGMA, SkipKind::None)?,
            n_vars,
            patch,
        })
    }

    /// Mean head on tokens, un-patched, still standardized.
    pub fn mean_standardized(&self, tokens: &Tensor) -> Result<Tensor> {
        unpatchify(&self.mu.forward_columns(tokens)?, self.n_vars, self.patch)
    }

    /// Scale head on tokens, un-patched, standardized (strictly positive).
    pub fn scale_standardized(&self, tokens: &Tensor) -> Result<Tensor> {
        unpatchify(&self.sigma.forward_columns(tokens)?.softplus()?, self.n_vars, self.patch)
    }
}

/// Predictive mean and scale in the original data scale, `batch × N × (m·s)`.
pub fn decode(heads: &DecoderHeads, z_sample: &Tensor, batch: &WindowBatch) -> Result<(Tensor, Tensor)> {
    let mu = batch.destandardize(&heads.mean_standardized(z_sample)?)?;
    let sigma = batch.destandardize_scale(&heads.scale_standardized(z_sample)?)?.add_scalar(SIGMA_FLOOR)?;
    Ok((mu, sigma))
}

/// Mean head on the Koopman reconstruction of the context, original scale.
pub fn reconstruct_context(heads: &DecoderHeads, x_hat_c: &Tensor, batch: &WindowBatch) -> Result<Tensor> {
    batch.destandardize(&heads.mean_standardized(x_hat_c)?)
}

/// Mean over the batch of the summed per-coordinate Gaussian negative log-likelihood.
pub fn gaussian_nll(y: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    if y.shape() != mu.shape() || y.shape() != sigma.shape() {
        return Err(Error::shape(
            "gaussian_nll",
            format!("y {:?}, mu {:?}, sigma {:?}", y.shape(), mu.shape(), sigma.shape()),
        ));
    }
    if let Some(bad) = sigma.data().iter().find(|s| !(**s > 0.0)) {
        return Err(Error::invalid(format!("sigma must be positive, got {bad}")));
    }
    let batch = if y.rank() > 0 { y.shape()[0] } else { 1 };
    let z = y.sub(mu)?.div(sigma)?;
    let per = z.mul(&z)?.scale(0.5)?.add(&sigma.log()?)?.add_scalar(HALF_LN_2PI)?;
    per.sum()?.scale(1.0 / batch as f64)
}

/// `KL(N(z', P) ‖ N(0, I))` summed over tokens, mean over the batch.
pub fn kl_to_standard_normal(post: &VariationalPosterior) -> Result<Tensor> {
    let [batch, d, _] = *post.mean.shape() else { unreachable!("checked at construction") };
    let mut cov_terms = Tensor::scalar(0.0);
    for p in &post.covariances {
        let copies = if p.tensor().rank() == 3 { p.tensor().shape()[0] } else { 1 };
        let trace = p.tensor().diagonal()?.sum()?;
        let log_det = cholesky(p)?.diagonal()?.log()?.sum()?.scale(2.0)?;
        let term = trace.sub(&log_det)?.add_scalar(-((d * copies) as f64))?;
        cov_terms = cov_terms.add(&term.scale(1.0 / copies as f64)?)?;
    }
    let mean_sq = post.mean.mul(&post.mean)?.sum()?.scale(1.0 / batch as f64)?;
    cov_terms.add(&mean_sq)?.scale(0.5)
}

/// Loss value plus its parts for logging.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub nll: f64,
    pub kl: f64,
    pub rec: f64,
}

/// Inputs of [`total_loss`].
pub struct LossInputs<'a> {
    pub target: &'a Tensor,
    pub mu: &'a Tensor,
    pub sigma: &'a Tensor,
    pub posterior: &'a VariationalPosterior,
    pub context: &'a Tensor,
    pub reconstruction: &'a Tensor,
}

/// `NLL + β·KL + λ·MSE(context, reconstruction)`.
pub fn total_loss(inp: &LossInputs<'_>, beta_kl: f64, lambda_rec: f64) -> Result<LossBreakdown> {
    if !(beta_kl >= 0.0) || !(lambda_rec >= 0.0) {
        return Err(Error::invalid(format!("loss weights must be >= 0, got {beta_kl}, {lambda_rec}")));
    }
    if inp.context.shape() != inp.reconstruction.shape() {
        return Err(Error::shape(
            "total_loss",
            format!("context {:?} vs reconstruction {:?}", inp.context.shape(), inp.reconstruction.shape()),
        ));
    }
    let nll = gaussian_nll(inp.target, inp.mu, inp.sigma)?;
    let kl = kl_to_standard_normal(inp.posterior)?;
    let diff = inp.context.sub(inp.reconstruction)?;
    let rec = diff.mul(&diff)?.mean()?;
    let total = nll.add(&kl.scale(beta_kl)?)?.add(&rec.scale(lambda_rec)?)?;
    Ok(LossBreakdown { nll: nll.item(), kl: kl.item(), rec: rec.item(), total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::gaussian;
    use crate::tensor::gradcheck::finite_difference_check;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn spd(data: &[f64], d: usize) -> SpdMatrix {
        SpdMatrix::new(t(&[d, d], data)).unwrap()
    }

    fn unit_batch(b: usize, n: usize, len: usize) -> WindowBatch {
        WindowBatch {
            context: Tensor::zeros(&[b, n, len]),
            target: Tensor::zeros(&[b, n, len]),
            mean: Tensor::zeros(&[b, n]),
            std: Tensor::ones(&[b, n]),
        }
    }

    #[test]
    fn resample_examples() {
        let mean = t(&[1, 1, 1], &[1.0]);
        let post = VariationalPosterior::new(mean.clone(), vec![spd(&[4.0], 1)]).unwrap();
        assert_eq!(resample(&post, &t(&[1, 1, 1], &[0.5])).unwrap().item(), 2.0);
        assert_eq!(resample(&post, &Tensor::zeros(&[1, 1, 1])).unwrap().data(), mean.data());

        let mean = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let eps = t(&[2, 2, 2], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]);
        let eye = SpdMatrix::new(Tensor::eye(2)).unwrap();
        let post = VariationalPosterior::new(mean.clone(), vec![eye.clone(), eye]).unwrap();
        assert_eq!(resample(&post, &eps).unwrap().data(), mean.add(&eps).unwrap().data());
        assert!(VariationalPosterior::new(mean, vec![spd(&[1.0], 1)]).is_err());
    }

    #[test]
    fn resample_moments_match_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = [0.5, -1.0];
        let p = [2.0, 0.6, 0.6, 0.5];
        let draws = 100_000;
        let mean = t(&[draws, 2, 1], &(0..draws).flat_map(|_| z).collect::<Vec<_>>());
        let post = VariationalPosterior::new(mean, vec![spd(&p, 2)]).unwrap();
        let eps = t(&[draws, 2, 1], &gaussian(&mut rng, 2 * draws, 1.0));
        let s = resample(&post, &eps).unwrap();
        let xs: Vec<[f64; 2]> = s.data().chunks(2).map(|c| [c[0], c[1]]).collect();
        let n = draws as f64;
        for i in 0..2 {
            let m = xs.iter().map(|x| x[i]).sum::<f64>() / n;
            let se = libm::sqrt(p[i * 2 + i] / n);
            assert!((m - z[i]).abs() < 3.0 * se, "mean {i}: {m}");
        }
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            let c = xs.iter().map(|x| (x[i] - z[i]) * (x[j] - z[j])).sum::<f64>() / n;
            // var of the product of jointly Gaussian centered variables
            let var = p[i * 2 + i] * p[j * 2 + j] + p[i * 2 + j] * p[i * 2 + j];
            let se = libm::sqrt(var / n);
            assert!((c - p[i * 2 + j]).abs() < 3.0 * se, "cov {i}{j}: {c}");
        }
    }

    #[test]
    fn nll_examples() {
        let y = t(&[1, 1, 1], &[0.3]);
        let one = Tensor::ones(&[1, 1, 1]);
        assert!((gaussian_nll(&y, &y, &one).unwrap().item() - 0.918_938_533_2).abs() < 1e-9);
        let sigma = t(&[1, 1, 1], &[2.5]);
        let v = gaussian_nll(&y.add_scalar(2.5).unwrap(), &y, &sigma).unwrap().item();
        assert!((v - (HALF_LN_2PI + libm::log(2.5) + 0.5)).abs() < 1e-12);
        assert!(gaussian_nll(&y, &y, &Tensor::zeros(&[1, 1, 1])).is_err());
        assert!(gaussian_nll(&y, &y, &Tensor::ones(&[1, 1, 2])).is_err());
    }

    #[test]
    fn nll_matches_density_and_averages_over_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = gaussian(&mut rng, 12, 1.0);
        let mu = gaussian(&mut rng, 12, 1.0);
        let sigma: Vec<f64> = gaussian(&mut rng, 12, 1.0).iter().map(|v| 0.2 + v.abs()).collect();
        let mut direct = 0.0;
        for i in 0..12 {
            let z = (y[i] - mu[i]) / sigma[i];
            let pdf = libm::exp(-0.5 * z * z) / (sigma[i] * libm::sqrt(2.0 * core::f64::consts::PI));
            direct -= libm::log(pdf);
        }
        let v = gaussian_nll(&t(&[3, 2, 2], &y), &t(&[3, 2, 2], &mu), &t(&[3, 2, 2], &sigma)).unwrap();
        assert!((v.item() - direct / 3.0).abs() < 1e-10);
    }

    #[test]
    fn nll_gradient_in_mean_vanishes_at_target() {
        let y = t(&[1, 1, 3], &[0.4, -1.0, 2.0]);
        let sigma = t(&[1, 1, 3], &[0.5, 1.0, 2.0]);
        let mu = Tensor::param(&[1, 1, 3], y.data().to_vec()).unwrap();
        gaussian_nll(&y, &mu, &sigma).unwrap().backward().unwrap();
        assert!(mu.grad().unwrap().iter().all(|g| g.abs() < 1e-14));
        let h = 1e-5;
        let f = |m: &[f64]| gaussian_nll(&y, &t(&[1, 1, 3], m), &sigma).unwrap().item();
        for i in 0..3 {
            let mut up = y.data().to_vec();
            up[i] += h;
            let mut dn = y.data().to_vec();
            dn[i] -= h;
            assert!(((f(&up) - f(&dn)) / (2.0 * h)).abs() < 1e-8);
            assert!(f(&up) > f(y.data()) && f(&dn) > f(y.data()));
        }
    }

    #[test]
    fn kl_examples() {
        let eye = SpdMatrix::new(Tensor::eye(3)).unwrap();
        let post = VariationalPosterior::new(Tensor::zeros(&[2, 3, 2]), vec![eye.clone(), eye.clone()]).unwrap();
        assert!(kl_to_standard_normal(&post).unwrap().item().abs() < 1e-15);
        let post = VariationalPosterior::new(t(&[1, 1, 1], &[1.0]), vec![spd(&[1.0], 1)]).unwrap();
        assert!((kl_to_standard_normal(&post).unwrap().item() - 0.5).abs() < 1e-15);
        let bumped = VariationalPosterior::new(t(&[1, 3, 1], &[0.0, 1e-3, 0.0]), vec![eye]).unwrap();
        assert!(kl_to_standard_normal(&bumped).unwrap().item() > 0.0);
        let squeezed = VariationalPosterior::new(Tensor::zeros(&[1, 1, 1]), vec![spd(&[0.99], 1)]).unwrap();
        assert!(kl_to_standard_normal(&squeezed).unwrap().item() > 0.0);
    }

    #[test]
    fn kl_with_batched_covariances_matches_shared() {
        let p = [1.5, 0.2, 0.2, 0.7];
        let mean = t(&[2, 2, 1], &[0.1, 0.2, -0.3, 0.4]);
        let shared = VariationalPosterior::new(mean.clone(), vec![spd(&p, 2)]).unwrap();
        let both: Vec<f64> = p.iter().chain(p.iter()).cloned().collect();
        let batched =
            VariationalPosterior::new(mean, vec![SpdMatrix::new(t(&[2, 2, 2], &both)).unwrap()]).unwrap();
        let a = kl_to_standard_normal(&shared).unwrap().item();
        let b = kl_to_standard_normal(&batched).unwrap().item();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for d in [2, 3] {
            let g = t(&[d, d], &gaussian(&mut rng, d * d, 0.6));
            let p = g.matmul(&g.transpose().unwrap()).unwrap().add(&Tensor::eye(d).scale(0.3).unwrap()).unwrap();
            let z = gaussian(&mut rng, d, 0.8);
            let post = VariationalPosterior::new(t(&[1, d, 1], &z), vec![SpdMatrix::new(p.clone()).unwrap()]).unwrap();
            let exact = kl_to_standard_normal(&post).unwrap().item();

            let l = p.cholesky_lower().unwrap();
            let log_det: f64 = (0..d).map(|i| 2.0 * libm::log(l.at(&[i, i]))).sum();
            let draws = 200_000;
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..draws {
                let eps = gaussian(&mut rng, d, 1.0);
                let mut x = z.clone();
                for (i, xi) in x.iter_mut().enumerate() {
                    for (j, e) in eps.iter().enumerate().take(i + 1) {
                        *xi += l.at(&[i, j]) * e;
                    }
                }
                // log q(x) − log p(x); the 2π terms cancel
                let lq = -0.5 * log_det - 0.5 * eps.iter().map(|e| e * e).sum::<f64>();
                let lp = -0.5 * x.iter().map(|v| v * v).sum::<f64>();
                let r = lq - lp;
                s1 += r;
                s2 += r * r;
            }
            let n = draws as f64;
            let mean = s1 / n;
            let se = libm::sqrt((s2 / n - mean * mean) / n);
            assert!((mean - exact).abs() < 3.0 * se, "d={d}: mc {mean} exact {exact} se {se}");
        }
    }

    fn heads(rng: &mut ChaCha8Rng, d: usize, n_vars: usize, patch: usize) -> (ParamStore, DecoderHeads) {
        let mut store = ParamStore::new();
        DecoderHeads::init(&mut store, rng, d, n_vars, patch).unwrap();
        let h = DecoderHeads::load(&store.bind(false).unwrap(), n_vars, patch).unwrap();
        (store, h)
    }

    #[test]
    fn decode_shapes_and_positive_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (_, h) = heads(&mut rng, 6, 2, 4);
        let z = t(&[3, 6, 5], &gaussian(&mut rng, 90, 3.0));
        let (mu, sigma) = decode(&h, &z, &unit_batch(3, 2, 20)).unwrap();
        assert_eq!(mu.shape(), &[3, 2, 20]);
        assert_eq!(sigma.shape(), &[3, 2, 20]);
        assert!(sigma.data().iter().all(|&s| s >= SIGMA_FLOOR));
        assert!(decode(&h, &Tensor::zeros(&[3, 5, 5]), &unit_batch(3, 2, 20)).is_err());
    }

    #[test]
    fn zero_scale_head_gives_softplus_of_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (mut store, _) = heads(&mut rng, 4, 2, 2);
        for p in store.iter_mut() {
            if p.name.starts_with(DecoderHeads::SIGMA) {
                let v = if p.name.ends_with("l2.bias") { 0.3 } else { 0.0 };
                p.data.iter_mut().for_each(|x| *x = v);
            }
        }
        let h = DecoderHeads::load(&store.bind(false).unwrap(), 2, 2).unwrap();
        let z = t(&[2, 4, 3], &gaussian(&mut rng, 24, 1.0));
        let (_, sigma) = decode(&h, &z, &unit_batch(2, 2, 6)).unwrap();
        let expected = libm::log1p(libm::exp(0.3)) + SIGMA_FLOOR;
        assert!(sigma.data().iter().all(|&s| (s - expected).abs() < 1e-15));
    }

    #[test]
    fn decode_with_linear_heads_unpatches_and_destandardizes() {
        // d = 2, N = 1, s = 2, two tokens; mean head reduced to its skip map [[1,0],[0,2]]
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (mut store, _) = heads(&mut rng, 2, 1, 2);
        for p in store.iter_mut() {
            if p.name.starts_with(DecoderHeads::MU) {
                let v: Vec<f64> = if p.name.ends_with("skip.weight") {
                    vec![1.0, 0.0, 0.0, 2.0]
                } else {
                    vec![0.0; p.data.len()]
                };
                p.data = v;
            }
        }
        let h = DecoderHeads::load(&store.bind(false).unwrap(), 1, 2).unwrap();
        // token columns (1, 3) and (5, 7)
        let z = t(&[1, 2, 2], &[1.0, 5.0, 3.0, 7.0]);
        let mut batch = unit_batch(1, 1, 4);
        batch.mean = t(&[1, 1], &[10.0]);
        batch.std = t(&[1, 1], &[2.0]);
        let (mu, _) = decode(&h, &z, &batch).unwrap();
        // standardized path [1, 6, 5, 14]
        assert_eq!(mu.data(), &[12.0, 22.0, 20.0, 38.0]);
        let rec = reconstruct_context(&h, &z, &batch).unwrap();
        assert_eq!(rec.data(), mu.data());
        assert_eq!(rec.shape(), &[1, 1, 4]);
    }

    #[test]
    fn total_loss_recombines_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let y = t(&[2, 1, 4], &gaussian(&mut rng, 8, 1.0));
        let mu = t(&[2, 1, 4], &gaussian(&mut rng, 8, 1.0));
        let sigma = t(&[2, 1, 4], &[0.5, 1.0, 1.5, 2.0, 0.7, 0.9, 1.1, 1.3]);
        let post = VariationalPosterior::new(t(&[2, 2, 1], &gaussian(&mut rng, 4, 1.0)), vec![spd(&[2.0, 0.1, 0.1, 0.5], 2)])
            .unwrap();
        let x = t(&[2, 1, 4], &gaussian(&mut rng, 8, 1.0));
        let xr = t(&[2, 1, 4], &gaussian(&mut rng, 8, 1.0));
        let inp = LossInputs { target: &y, mu: &mu, sigma: &sigma, posterior: &post, context: &x, reconstruction: &xr };
        let b = total_loss(&inp, 0.7, 1.3).unwrap();
        let nll = gaussian_nll(&y, &mu, &sigma).unwrap().item();
        let kl = kl_to_standard_normal(&post).unwrap().item();
        let rec = x.data().iter().zip(xr.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 8.0;
        assert!((b.total.item() - (nll + 0.7 * kl + 1.3 * rec)).abs() < 1e-12);
        assert!((b.rec - rec).abs() < 1e-14);
        assert_eq!(total_loss(&inp, 0.0, 0.0).unwrap().total.item(), nll);
        let same = LossInputs { reconstruction: &x, ..inp };
        assert_eq!(total_loss(&same, 1.0, 1.0).unwrap().rec, 0.0);
        assert!(total_loss(&same, -1.0, 1.0).is_err());
    }

    #[test]
    fn posterior_losses_have_valid_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let g = gaussian(&mut rng, 9, 0.5);
        let params = vec![
            t(&[2, 3, 2], &gaussian(&mut rng, 12, 1.0)),
            t(&[3, 3], &g),
        ];
        let eps = t(&[2, 3, 2], &gaussian(&mut rng, 12, 1.0));
        let f = |v: &[Tensor]| -> Result<Tensor> {
            let p = crate::kalman::covariance_from_raw(&v[1])?;
            let p = SpdMatrix::new(p)?;
            let post = VariationalPosterior::new(v[0].clone(), vec![p.clone(), p])?;
            let s = resample(&post, &eps)?;
            kl_to_standard_normal(&post)?.add(&s.tanh()?.sum()?)
        };
        let r = finite_difference_check(f, &params, 1e-6, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
