//! `train`, `evaluate` and `forecast`. Every output goes under `cfg.out`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use koopkal_core::data::{make_windows, synth_linear_gaussian, SeriesDataset, Split, WindowSet};
use koopkal_core::metrics::{quantile_sorted, MetricAccumulator, Scores};
use koopkal_core::model::{sample_forecasts, ModelBundle};
use koopkal_core::train::{evaluate_accumulated, stream_rng, EpochLog, Trainer};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::csvio::{format_f64, load_csv};
use crate::error::{CliError, Result};

pub const CONFIG_ECHO: &str = "config.toml";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CHECKPOINT: &str = "checkpoint";
pub const METRICS: &str = "metrics.json";
pub const FORECAST: &str = "forecast.csv";

const STREAM_EVAL: u64 = 5 << 56;
const STREAM_FORECAST: u64 = 6 << 56;

pub fn load_dataset(cfg: &RunConfig) -> Result<SeriesDataset> {
    let mut ds = match cfg.data.as_str() {
        "csv" => load_csv(cfg.csv_path.as_deref().expect("validated"), cfg.csv_timestamp)?,
        _ => synth_linear_gaussian(&cfg.synth_config())?.0,
    };
    ds.splits = cfg.fractions();
    Ok(ds)
}

fn windows(cfg: &RunConfig, ds: &SeriesDataset, split: Split, stride: usize) -> Result<WindowSet> {
    make_windows(ds, cfg.context_len, cfg.horizon, stride, split)
        .map_err(|e| CliError::config(format!("{} windows: {e}", split.name())))
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    let echo = cfg.out.join(CONFIG_ECHO);
    fs::write(&echo, cfg.to_toml()).map_err(|e| CliError::io(&echo, e))
}

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    loss: f64,
    nll: f64,
    kl: f64,
    rec: f64,
    val_crps: Option<f64>,
    u_norm: f64,
    k_spectral: f64,
}

pub fn log_line(l: &EpochLog) -> String {
    serde_json::to_string(&LogLine {
        epoch: l.epoch,
        loss: l.loss,
        nll: l.nll,
        kl: l.kl,
        rec: l.rec,
        val_crps: l.val_crps,
        u_norm: l.u_norm,
        k_spectral: l.k_spectral,
    })
    .expect("log line serializes")
}

/// Fresh trainer for `cfg` on `ds`: model seeded by `cfg.seed`, training-split
/// statistics attached.
pub fn new_trainer(cfg: &RunConfig, ds: &SeriesDataset) -> Result<Trainer> {
    let hp = cfg.hyper_params_for(ds.n_vars())?;
    let mut bundle = ModelBundle::init(hp, cfg.seed)?;
    bundle.norm_stats = Some(ds.split_stats(Split::Train)?);
    Ok(Trainer::new(bundle, cfg.seed))
}

/// Trains up to `cfg.epochs`, optionally continuing from a checkpoint.
/// Writes the config echo, the log and the checkpoint pair.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let ds = load_dataset(cfg)?;
    let hp = cfg.hyper_params_for(ds.n_vars())?;
    let train = windows(cfg, &ds, Split::Train, cfg.stride)?;
    let val = if cfg.val_fraction > 0.0 { Some(windows(cfg, &ds, Split::Val, cfg.stride)?) } else { None };
    let mut trainer = match resume {
        Some(p) => {
            let mut t = checkpoint::load_expecting(p, &hp)?;
            t.bundle.hp.epochs = hp.epochs;
            t
        }
        None => new_trainer(cfg, &ds)?,
    };
    prepare_out(cfg)?;
    let log_path = cfg.out.join(TRAIN_LOG);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut io_err = None;
    let result = trainer.train(&train, val.as_ref(), |l| {
        if let Err(e) = writeln!(log, "{}", log_line(l)).and_then(|_| log.flush()) {
            io_err.get_or_insert(e);
        }
        println!(
            "epoch {:>4}  loss {:>12.5}  val_crps {:>10}  |U| {:.4}",
            l.epoch,
            l.loss,
            l.val_crps.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into()),
            l.u_norm
        );
    });
    if let Some(e) = io_err {
        return Err(CliError::io(&log_path, e));
    }
    let stem = cfg.out.join(CHECKPOINT);
    // keep what was trained even when a later epoch failed
    checkpoint::save(&trainer, &stem)?;
    result.map_err(|e| CliError::Runtime(format!("training aborted: {e}")))?;
    Ok(stem)
}

#[derive(Serialize)]
struct ScoreRecord {
    crps: f64,
    normalized_crps: f64,
    nmae: f64,
}

impl From<&Scores> for ScoreRecord {
    fn from(s: &Scores) -> Self {
        ScoreRecord { crps: s.crps, normalized_crps: s.normalized_crps, nmae: s.nmae }
    }
}

#[derive(Serialize)]
struct HorizonRecord {
    step: usize,
    #[serde(flatten)]
    scores: ScoreRecord,
}

#[derive(Serialize)]
struct SplitRecord {
    windows: usize,
    overall: ScoreRecord,
    per_horizon: Vec<HorizonRecord>,
}

#[derive(Serialize)]
struct MetricsFile {
    samples: usize,
    seed: u64,
    splits: BTreeMap<String, SplitRecord>,
}

fn split_record(acc: &MetricAccumulator, n: usize) -> Result<SplitRecord> {
    let overall = ScoreRecord::from(&acc.scores()?);
    let per_horizon = (0..acc.horizon())
        .map(|h| Ok(HorizonRecord { step: h + 1, scores: ScoreRecord::from(&acc.scores_at(h)?) }))
        .collect::<Result<_>>()?;
    Ok(SplitRecord { windows: n, overall, per_horizon })
}

/// Loads the selected (best validation) model of a checkpoint for `cfg`.
pub fn load_model(cfg: &RunConfig, ds: &SeriesDataset, stem: &Path) -> Result<ModelBundle> {
    let hp = cfg.hyper_params_for(ds.n_vars())?;
    Ok(checkpoint::load_expecting(stem, &hp)?.best_bundle())
}

/// Scores every non-empty split and writes the metrics file.
pub fn cmd_evaluate(cfg: &RunConfig, stem: &Path) -> Result<PathBuf> {
    let ds = load_dataset(cfg)?;
    let bundle = load_model(cfg, &ds, stem)?;
    let mut splits = BTreeMap::new();
    for (i, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
        let Ok(w) = make_windows(&ds, cfg.context_len, cfg.horizon, cfg.stride, split) else {
            continue;
        };
        let mut rng = stream_rng(cfg.seed, STREAM_EVAL, i, 0);
        let acc = evaluate_accumulated(&bundle, &w, cfg.samples, &mut rng)?;
        splits.insert(split.name().to_string(), split_record(&acc, w.len())?);
    }
    if splits.is_empty() {
        return Err(CliError::config("no split is long enough for one window (T + L)"));
    }
    prepare_out(cfg)?;
    let path = cfg.out.join(METRICS);
    let text = serde_json::to_string_pretty(&MetricsFile { samples: cfg.samples, seed: cfg.seed, splits })
        .expect("metrics serialize");
    fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// Forecast of one window: `samples[s][v][h]` plus the observation `[v][h]`.
#[derive(Debug, Clone)]
pub struct WindowForecast {
    pub names: Vec<String>,
    /// Absolute time index of the first horizon step.
    pub first_step: usize,
    pub n_samples: usize,
    pub horizon: usize,
    pub samples: Vec<f64>,
    pub observed: Vec<f64>,
}

impl WindowForecast {
    pub fn coordinate(&self, var: usize, step: usize) -> Vec<f64> {
        let stride = self.names.len() * self.horizon;
        (0..self.n_samples).map(|s| self.samples[s * stride + var * self.horizon + step]).collect()
    }

    /// `(q2.5, median, q97.5)` of one coordinate.
    pub fn interval(&self, var: usize, step: usize) -> (f64, f64, f64) {
        let mut c = self.coordinate(var, step);
        c.sort_by(f64::total_cmp);
        (quantile_sorted(&c, 0.025), quantile_sorted(&c, 0.5), quantile_sorted(&c, 0.975))
    }
}

pub fn forecast_window(bundle: &ModelBundle, ds: &SeriesDataset, set: &WindowSet, index: usize, n_samples: usize, seed: u64) -> Result<WindowForecast> {
    if index >= set.len() {
        return Err(CliError::config(format!("window {index} is out of range ({} windows)", set.len())));
    }
    let batch = set.batch(&[index], &bundle.normalization()?)?;
    let mut rng = stream_rng(seed, STREAM_FORECAST, index, 0);
    let dist = sample_forecasts(bundle, &batch, n_samples, &mut rng)?;
    Ok(WindowForecast {
        names: ds.names.clone(),
        first_step: set.starts[index] + set.context_len,
        n_samples,
        horizon: set.horizon,
        samples: dist.paths,
        observed: set.targets[index].clone(),
    })
}

pub fn write_forecast(path: &Path, f: &WindowForecast) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| CliError::io(path, e);
    let mut header = vec!["variable".to_string(), "step".into(), "time_index".into(), "observed".into()];
    header.extend(["median".into(), "q2.5".into(), "q97.5".into()]);
    header.extend((0..f.n_samples).map(|s| format!("sample_{s}")));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (v, name) in f.names.iter().enumerate() {
        for h in 0..f.horizon {
            let (lo, mid, hi) = f.interval(v, h);
            let mut row = vec![name.clone(), (h + 1).to_string(), (f.first_step + h).to_string()];
            row.extend([f.observed[v * f.horizon + h], mid, lo, hi].iter().map(|x| format_f64(*x)));
            row.extend(f.coordinate(v, h).iter().map(|x| format_f64(*x)));
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Samples one window of `cfg.forecast_split` and writes the forecast CSV.
pub fn cmd_forecast(cfg: &RunConfig, stem: &Path) -> Result<PathBuf> {
    let ds = load_dataset(cfg)?;
    let bundle = load_model(cfg, &ds, stem)?;
    let set = windows(cfg, &ds, cfg.split()?, cfg.stride)?;
    let f = forecast_window(&bundle, &ds, &set, cfg.window, cfg.samples, cfg.seed)?;
    prepare_out(cfg)?;
    let path = cfg.out.join(FORECAST);
    write_forecast(&path, &f)?;
    Ok(path)
}
