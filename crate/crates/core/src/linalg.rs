//! Differentiable structured linear algebra: ridge pseudoinverse, jittered
//! Cholesky, SPD solves and positive-definiteness diagnostics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::Tensor;

/// Relative jitter levels tried in order, scaled by the mean diagonal.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

pub const DEFAULT_RIDGE: f64 = 1e-6;

fn square(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    match *a.shape() {
        [r, c] if r == c => Ok((1, r)),
        [b, r, c] if r == c => Ok((b, r)),
        _ => Err(Error::shape(op, format!("expected square matrices, got {:?}", a.shape()))),
    }
}

/// Identity with the same (optionally batched) layout as `a`, scaled per batch element.
fn scaled_identity(a: &Tensor, scales: &[f64]) -> Tensor {
    let d = *a.shape().last().expect("square");
    let mut data = vec![0.0; a.numel()];
    for (t, s) in scales.iter().enumerate() {
        for i in 0..d {
            data[t * d * d + i * d + i] = *s;
        }
    }
    Tensor::new(a.shape(), data).expect("finite scales")
}

/// `½(A + Aᵀ)`, exactly symmetric.
pub fn symmetrize(a: &Tensor) -> Result<Tensor> {
    square("symmetrize", a)?;
    a.add(&a.transpose()?)?.scale(0.5)
}

/// Symmetric positive-definite matrix (or batch of them) whose Cholesky
/// factorization is known to succeed, possibly after diagonal jitter.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    matrix: Tensor,
    jitter: Vec<f64>,
}

impl SpdMatrix {
    /// Symmetrizes `a` and probes the jitter ladder. Fails with the leading
    /// minor of the last attempt when no ladder level factors.
    pub fn new(a: Tensor) -> Result<SpdMatrix> {
        let (nb, d) = square("spd", &a)?;
        let matrix = symmetrize(&a)?;
        let mut jitter = Vec::with_capacity(nb);
        let mut buf = vec![0.0; d * d];
        for t in 0..nb {
            let block = &matrix.data()[t * d * d..(t + 1) * d * d];
            let mean_diag = (0..d).map(|i| block[i * d + i]).sum::<f64>() / d as f64;
            let mut applied = None;
            let mut last_minor = 1;
            for level in JITTER_LADDER {
                let j = level * mean_diag.abs();
                if level > 0.0 && !(j > 0.0) {
                    continue;
                }
                buf.copy_from_slice(block);
                for i in 0..d {
                    buf[i * d + i] += j;
                }
                match kernels::cholesky_in_place(&mut buf, d) {
                    Ok(()) => {
                        applied = Some(j);
                        break;
                    }
                    Err(minor) => last_minor = minor,
                }
            }
            match applied {
                Some(j) => jitter.push(j),
                None => return Err(Error::NotPositiveDefinite { minor: last_minor }),
            }
        }
        Ok(SpdMatrix { matrix, jitter })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.matrix
    }

    /// Largest diagonal jitter applied across the batch; zero when none.
    pub fn jitter_applied(&self) -> f64 {
        self.jitter.iter().cloned().fold(0.0, f64::max)
    }

    pub fn dim(&self) -> usize {
        *self.matrix.shape().last().expect("square")
    }

    fn jittered(&self) -> Result<Tensor> {
        if self.jitter.iter().all(|&j| j == 0.0) {
            Ok(self.matrix.clone())
        } else {
            self.matrix.add(&scaled_identity(&self.matrix, &self.jitter))
        }
    }
}

/// Lower factor `L` with `A = L Lᵀ` (plus any recorded jitter). Differentiable.
pub fn cholesky(a: &SpdMatrix) -> Result<Tensor> {
    a.jittered()?.cholesky_lower()
}

/// Solves `A X = B` without forming an inverse. Differentiable in both.
pub fn solve_spd(a: &SpdMatrix, b: &Tensor) -> Result<Tensor> {
    a.jittered()?.solve_spd(b)
}

/// Ridge-regularized pseudoinverse `Mᵀ(MMᵀ + λI)⁻¹` of an `a×b` matrix (or
/// batch). The push-through identity `(MᵀM + λI)⁻¹Mᵀ` is used when `a > b`
/// so the solve always happens on the smaller Gram matrix.
pub fn ridge_pinv(m: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    if m.numel() == 0 {
        return Err(Error::shape("ridge_pinv", "empty matrix"));
    }
    let (rows, cols) = match *m.shape() {
        [r, c] | [_, r, c] => (r, c),
        _ => return Err(Error::shape("ridge_pinv", format!("expected rank 2 or 3, got {:?}", m.shape()))),
    };
    let mt = m.transpose()?;
    let wide = rows <= cols;
    let gram = if wide { m.matmul(&mt)? } else { mt.matmul(m)? };
    let gram = if lambda > 0.0 {
        let nb = gram.numel() / (gram.shape().last().unwrap().pow(2));
        gram.add(&scaled_identity(&gram, &vec![lambda; nb]))?
    } else {
        gram
    };
    let rhs = if wide { m } else { &mt };
    let solved = gram.solve_spd(rhs).map_err(|e| match e {
        Error::NotPositiveDefinite { .. } if lambda == 0.0 => Error::RankDeficient,
        e => e,
    })?;
    if wide {
        solved.transpose()
    } else {
        Ok(solved)
    }
}

/// Outcome of [`is_positive_definite`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdDiagnosis {
    pub positive_definite: bool,
    /// Estimate of the smallest eigenvalue over the batch.
    pub min_eigenvalue: f64,
}

/// True iff every matrix factors without jitter. The eigenvalue estimate uses
/// inverse iteration on the factor when it exists, and shifted power
/// iteration otherwise.
pub fn is_positive_definite(a: &Tensor, tol: f64) -> PdDiagnosis {
    let Ok((nb, d)) = square("is_positive_definite", a) else {
        return PdDiagnosis { positive_definite: false, min_eigenvalue: f64::NAN };
    };
    let mut pd = true;
    let mut min_eig = f64::INFINITY;
    for t in 0..nb {
        let block = &a.data()[t * d * d..(t + 1) * d * d];
        let asym = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| (block[i * d + j] - block[j * d + i]).abs())
            .fold(0.0, f64::max);
        let mut factor = block.to_vec();
        let ok = asym <= tol && kernels::cholesky_in_place(&mut factor, d).is_ok();
        let eig = if ok {
            inverse_iteration(&factor, d)
        } else {
            shifted_power_iteration(block, d)
        };
        pd &= ok;
        min_eig = min_eig.min(eig);
    }
    PdDiagnosis { positive_definite: pd, min_eigenvalue: min_eig }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn start_vector(d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
    normalize(&mut v);
    v
}

const ITERATIONS: usize = 60;

fn inverse_iteration(factor: &[f64], d: usize) -> f64 {
    let mut v = start_vector(d);
    let mut growth = 0.0;
    for _ in 0..ITERATIONS {
        kernels::cholesky_solve(factor, &mut v, d, 1);
        growth = normalize(&mut v);
    }
    if growth > 0.0 {
        1.0 / growth
    } else {
        0.0
    }
}

fn shifted_power_iteration(a: &[f64], d: usize) -> f64 {
    // Gershgorin bound on the spectrum; power iteration on (σI − A) finds σ − λ_min.
    let sigma = (0..d)
        .map(|i| (0..d).map(|j| a[i * d + j].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut v = start_vector(d);
    let mut w = vec![0.0; d];
    let mut rayleigh = 0.0;
    for _ in 0..ITERATIONS * 4 {
        for i in 0..d {
            w[i] = sigma * v[i] - (0..d).map(|j| a[i * d + j] * v[j]).sum::<f64>();
        }
        rayleigh = v.iter().zip(&w).map(|(x, y)| x * y).sum();
        v.copy_from_slice(&w);
        if normalize(&mut v) == 0.0 {
            return sigma;
        }
    }
    sigma - rayleigh
}
