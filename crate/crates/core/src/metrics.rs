//! Sample-based probabilistic forecast scores: CRPS and NMAE.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Empirical CRPS of `samples` against `x`:
/// `mean|X − x| − ½·mean|X − X'|` over all ordered sample pairs.
pub fn crps_empirical(samples: &[f64], x: f64) -> Result<f64> {
    let s = check_samples(samples)?;
    let mut abs_err = 0.0;
    let mut spread = 0.0;
    for &a in samples {
        abs_err += (a - x).abs();
        for &b in samples {
            spread += (a - b).abs();
        }
    }
    Ok(abs_err / s - 0.5 * spread / (s * s))
}

/// Same value as [`crps_empirical`] in `O(S log S)`.
pub fn crps_sorted(samples: &[f64], x: f64) -> Result<f64> {
    let s = check_samples(samples)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let abs_err: f64 = sorted.iter().map(|a| (a - x).abs()).sum();
    // Σ_i Σ_j |x_i − x_j| = 2 Σ_i (2i − S + 1) x_(i)
    let spread: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * i as f64 - s + 1.0) * v)
        .sum::<f64>()
        * 2.0;
    Ok(abs_err / s - 0.5 * spread / (s * s))
}

fn check_samples(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!("CRPS needs at least 2 samples, got {}", samples.len())));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite forecast sample"));
    }
    Ok(samples.len() as f64)
}

/// `Σ|pred − truth| / Σ|truth|`.
pub fn nmae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("nmae", format!("{} predictions vs {} observations", pred.len(), truth.len())));
    }
    let denom: f64 = truth.iter().map(|v| v.abs()).sum();
    if !(denom > 0.0) {
        return Err(Error::invalid("NMAE is undefined when every observation is zero"));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / denom)
}

/// Linear-interpolation quantile of already sorted values, `q ∈ [0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let w = pos - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// `S` sample paths (`S × N × L`, row-major) and the realized `N × L` path.
#[derive(Debug, Clone)]
pub struct SampleForecast {
    pub samples: Vec<f64>,
    pub observation: Vec<f64>,
    pub n_samples: usize,
    pub n_vars: usize,
    pub horizon: usize,
}

impl SampleForecast {
    pub fn new(samples: Vec<f64>, observation: Vec<f64>, n_samples: usize, n_vars: usize, horizon: usize) -> Result<Self> {
        if observation.len() != n_vars * horizon || samples.len() != n_samples * n_vars * horizon {
            return Err(Error::shape(
                "sample_forecast",
                format!(
                    "{} samples and {} observations for S={n_samples}, N={n_vars}, L={horizon}",
                    samples.len(),
                    observation.len()
                ),
            ));
        }
        if n_samples < 2 {
            return Err(Error::invalid(format!("CRPS needs at least 2 samples, got {n_samples}")));
        }
        Ok(SampleForecast { samples, observation, n_samples, n_vars, horizon })
    }

    /// Samples of coordinate `(var, step)`.
    pub fn coordinate(&self, var: usize, step: usize) -> Vec<f64> {
        let stride = self.n_vars * self.horizon;
        (0..self.n_samples).map(|s| self.samples[s * stride + var * self.horizon + step]).collect()
    }
}

/// Per-horizon-step sums over many forecast windows.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAccumulator {
    crps: Vec<f64>,
    abs_err: Vec<f64>,
    abs_truth: Vec<f64>,
    count: Vec<usize>,
}

/// Aggregated scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    /// Mean CRPS over all coordinates.
    pub crps: f64,
    /// `Σ CRPS / Σ |x|`.
    pub normalized_crps: f64,
    /// NMAE of the per-coordinate sample median.
    pub nmae: f64,
    pub coordinates: usize,
}

impl MetricAccumulator {
    pub fn new(horizon: usize) -> Self {
        MetricAccumulator {
            crps: vec![0.0; horizon],
            abs_err: vec![0.0; horizon],
            abs_truth: vec![0.0; horizon],
            count: vec![0; horizon],
        }
    }

    pub fn add(&mut self, f: &SampleForecast) -> Result<()> {
        if f.horizon != self.crps.len() {
            return Err(Error::shape("metrics", format!("horizon {} vs {}", f.horizon, self.crps.len())));
        }
        for v in 0..f.n_vars {
            for t in 0..f.horizon {
                let xs = f.coordinate(v, t);
                let x = f.observation[v * f.horizon + t];
                self.crps[t] += crps_empirical(&xs, x)?;
                self.abs_err[t] += (median(&xs) - x).abs();
                self.abs_truth[t] += x.abs();
                self.count[t] += 1;
            }
        }
        Ok(())
    }

    fn scores_over(&self, steps: core::ops::Range<usize>) -> Result<Scores> {
        let sum = |v: &[f64]| v[steps.clone()].iter().sum::<f64>();
        let n: usize = self.count[steps.clone()].iter().sum();
        if n == 0 {
            return Err(Error::invalid("no forecasts were scored"));
        }
        let truth = sum(&self.abs_truth);
        if !(truth > 0.0) {
            return Err(Error::invalid("normalized scores are undefined when every observation is zero"));
        }
        Ok(Scores {
            crps: sum(&self.crps) / n as f64,
            normalized_crps: sum(&self.crps) / truth,
            nmae: sum(&self.abs_err) / truth,
            coordinates: n,
        })
    }

    pub fn scores(&self) -> Result<Scores> {
        self.scores_over(0..self.crps.len())
    }

    /// Scores restricted to one horizon step.
    pub fn scores_at(&self, step: usize) -> Result<Scores> {
        self.scores_over(step..step + 1)
    }

    pub fn horizon(&self) -> usize {
        self.crps.len()
    }
}
