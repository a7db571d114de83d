//! Training loop with validation-based model selection.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::data::WindowSet;
use crate::metrics::{MetricAccumulator, Scores};
use crate::model::{forward_pass, posterior_noise, sample_forecasts, ModelBundle};
use crate::optim::{adam_step, clip_grad_norm, AdamState};
use crate::params::ParamStore;

const STREAM_SHUFFLE: u64 = 1 << 56;
const STREAM_STEP: u64 = 2 << 56;
const STREAM_VAL: u64 = 3 << 56;

/// Deterministic generator for one (purpose, epoch, batch) triple.
pub fn stream_rng(seed: u64, domain: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(domain | ((epoch as u64) << 24) | batch as u64);
    r
}

/// Loss parts of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub rec: f64,
    pub grad_norm: f64,
    pub u_norm: f64,
    pub k_spectral: f64,
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub rec: f64,
    pub val_crps: Option<f64>,
    pub u_norm: f64,
    pub k_spectral: f64,
}

/// Parameters of the best validation epoch so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_crps: f64,
    pub params: ParamStore,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub bundle: ModelBundle,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub best: Option<BestSnapshot>,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, seed: u64) -> Trainer {
        let hp = &bundle.hp;
        let adam = AdamState::new(&bundle.params, hp.lr, hp.beta1, hp.beta2, hp.adam_eps);
        Trainer { bundle, adam, epoch: 0, seed, best: None }
    }

    /// Window order of 0-based epoch `epoch`.
    pub fn epoch_order(&self, epoch: usize, n_windows: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n_windows).collect();
        idx.shuffle(&mut stream_rng(self.seed, STREAM_SHUFFLE, epoch, 0));
        idx
    }

    /// Batches of 0-based epoch `epoch`.
    pub fn epoch_batches(&self, epoch: usize, n_windows: usize) -> Vec<Vec<usize>> {
        self.epoch_order(epoch, n_windows)
            .chunks(self.bundle.hp.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    /// One optimizer step on the given training rows.
    pub fn step(&mut self, train: &WindowSet, rows: &[usize], epoch: usize, batch_index: usize) -> Result<StepStats> {
        let norm = self.bundle.normalization()?;
        let batch = train.batch(rows, &norm)?;
        self.bundle.check_batch(&batch)?;
        let hp = self.bundle.hp.clone();
        let ps = self.bundle.params.bind(true)?;
        let mut rng = stream_rng(self.seed, STREAM_STEP, epoch, batch_index);
        let eps = posterior_noise(&mut rng, &hp, rows.len())?;
        let out = forward_pass(&ps, &hp, &batch, &eps)?;
        out.loss.total.backward()?;
        let mut grads = ps.grads();
        let grad_norm = clip_grad_norm(&mut grads, hp.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
        adam_step(&mut self.adam, &mut self.bundle.params, &grads)?;
        Ok(StepStats {
            loss: out.loss.total.item(),
            nll: out.loss.nll,
            kl: out.loss.kl,
            rec: out.loss.rec,
            grad_norm,
            u_norm: out.diagnostics.u_norm,
            k_spectral: out.diagnostics.k_spectral,
        })
    }

    /// Trains one epoch, scores validation, updates the best snapshot.
    pub fn run_epoch(&mut self, train: &WindowSet, val: Option<&WindowSet>) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::invalid("no training windows"));
        }
        let epoch = self.epoch;
        let wrap = |e: Error, b: usize| Error::AtStep {
            stage: "epoch",
            step: epoch + 1,
            source: Box::new(Error::AtStep { stage: "batch", step: b, source: Box::new(e) }),
        };
        let batches = self.epoch_batches(epoch, train.len());
        let mut sums = [0.0; 6];
        for (b, rows) in batches.iter().enumerate() {
            let s = self.step(train, rows, epoch, b).map_err(|e| wrap(e, b))?;
            for (acc, v) in sums.iter_mut().zip([s.loss, s.nll, s.kl, s.rec, s.u_norm, s.k_spectral]) {
                *acc += v;
            }
        }
        let nb = batches.len() as f64;
        self.epoch += 1;
        let val_crps = match val {
            Some(v) if !v.is_empty() => {
                let mut rng = stream_rng(self.seed, STREAM_VAL, epoch, 0);
                Some(evaluate(&self.bundle, v, self.bundle.hp.val_samples, &mut rng)?.crps)
            }
            _ => None,
        };
        let score = val_crps.unwrap_or(f64::INFINITY);
        let better = match &self.best {
            None => true,
            Some(b) => score < b.val_crps,
        };
        if better {
            self.best = Some(BestSnapshot { epoch: self.epoch, val_crps: score, params: self.bundle.params.clone() });
        }
        Ok(EpochLog {
            epoch: self.epoch,
            loss: sums[0] / nb,
            nll: sums[1] / nb,
            kl: sums[2] / nb,
            rec: sums[3] / nb,
            val_crps,
            u_norm: sums[4] / nb,
            k_spectral: sums[5] / nb,
        })
    }

    /// Runs the remaining epochs up to `hp.epochs`, reporting each one.
    pub fn train(&mut self, train: &WindowSet, val: Option<&WindowSet>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.bundle.hp.epochs {
            let log = self.run_epoch(train, val)?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    /// The selected model: best validation epoch, or the current parameters
    /// when nothing was scored yet.
    pub fn best_bundle(&self) -> ModelBundle {
        let mut b = self.bundle.clone();
        if let Some(best) = &self.best {
            b.params = best.params.clone();
        }
        b
    }
}

/// Sample-based scores over every window of a set.
pub fn evaluate<R: rand::Rng + ?Sized>(bundle: &ModelBundle, windows: &WindowSet, n_samples: usize, rng: &mut R) -> Result<Scores> {
    evaluate_accumulated(bundle, windows, n_samples, rng)?.scores()
}

/// Like [`evaluate`] but keeps the per-horizon sums.
pub fn evaluate_accumulated<R: rand::Rng + ?Sized>(
    bundle: &ModelBundle,
    windows: &WindowSet,
    n_samples: usize,
    rng: &mut R,
) -> Result<MetricAccumulator> {
    if n_samples < 2 {
        return Err(Error::invalid("CRPS needs at least 2 samples"));
    }
    let norm = bundle.normalization()?;
    let mut acc = MetricAccumulator::new(windows.horizon);
    let rows: Vec<usize> = (0..windows.len()).collect();
    for chunk in rows.chunks(bundle.hp.batch_size.max(1)) {
        let batch = windows.batch(chunk, &norm)?;
        let dist = sample_forecasts(bundle, &batch, n_samples, rng)?;
        for (i, &r) in chunk.iter().enumerate() {
            acc.add(&dist.window(i, windows.targets[r].clone())?)?;
        }
    }
    Ok(acc)
}
