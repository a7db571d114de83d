//! Run configuration: a flat TOML table plus `--key value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use koopkal_core::data::{LinearGaussianConfig, SplitFractions};
use koopkal_core::koopman::OperatorMode;
use koopkal_core::model::{HyperParams, NormMode, Variant};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `synth` or `csv`.
    pub data: String,
    pub csv_path: Option<PathBuf>,
    pub csv_timestamp: bool,
    pub synth_vars: usize,
    pub synth_state: usize,
    pub synth_steps: usize,
    pub synth_radius_min: f64,
    pub synth_radius_max: f64,
    pub synth_process_noise: f64,
    pub synth_obs_noise: f64,
    pub synth_seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub stride: usize,

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
    /// `instance`, `global` or `none`.
    pub norm: String,
    /// `mixed`, `local` or `global`.
    pub operator: String,
    pub integrator: bool,
    pub skip: bool,
    pub control: bool,

    pub seed: u64,
    pub samples: usize,
    pub out: PathBuf,
    /// Split used by `forecast`.
    pub forecast_split: String,
    pub window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = HyperParams::new(4, 32, 32, 8, 16);
        let synth = LinearGaussianConfig::new(4, 4, 5000, 0);
        RunConfig {
            data: "synth".into(),
            csv_path: None,
            csv_timestamp: false,
            synth_vars: synth.n_vars,
            synth_state: synth.d_state,
            synth_steps: synth.steps,
            synth_radius_min: synth.radius.0,
            synth_radius_max: synth.radius.1,
            synth_process_noise: synth.process_noise,
            synth_obs_noise: synth.obs_noise,
            synth_seed: synth.seed,
            train_fraction: SplitFractions::default().train,
            val_fraction: SplitFractions::default().val,
            stride: 1,
            context_len: hp.context_len,
            horizon: hp.horizon,
            patch: hp.patch,
            d_model: hp.d_model,
            lr: hp.lr,
            beta1: hp.beta1,
            beta2: hp.beta2,
            adam_eps: hp.adam_eps,
            beta_kl: hp.beta_kl,
            lambda_rec: hp.lambda_rec,
            lambda_ridge: hp.lambda_ridge,
            batch_size: hp.batch_size,
            epochs: hp.epochs,
            grad_clip: hp.grad_clip,
            val_samples: hp.val_samples,
            norm: hp.norm.name().into(),
            operator: "mixed".into(),
            integrator: true,
            skip: true,
            control: true,
            seed: 0,
            samples: 100,
            out: PathBuf::from("run"),
            forecast_split: "test".into(),
            window: 0,
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::config(format!("config field `{name}`: {msg}"))
}

/// Parses one override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults when `None`) and applies `overrides`
    /// in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let known = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        for (key, raw) in overrides {
            if !known.contains_key(key) && key != "csv_path" {
                return Err(CliError::config(format!("unknown config key `{key}`")));
            }
            table.insert(key.clone(), parse_value(raw));
        }
        // through text so that type errors carry a span naming the key
        let text = toml::to_string(&table).map_err(|e| CliError::config(e.to_string()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e: toml::de::Error| {
            let msg = e.message().trim().to_string();
            let key = e.span().and_then(|sp| {
                let line = text[..sp.start].rsplit('\n').next().unwrap_or("").to_string()
                    + text[sp.start..].split('\n').next().unwrap_or("");
                line.split_once('=').map(|(k, _)| k.trim().to_string())
            });
            let msg = match key {
                Some(k) if !msg.contains(&k) => format!("config field `{k}`: {msg}"),
                _ => msg,
            };
            match path {
                Some(p) => CliError::config(format!("{}: {msg}", p.display())),
                None => CliError::config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        match self.data.as_str() {
            "synth" => {
                if self.synth_vars == 0 || self.synth_state == 0 {
                    return Err(field("synth_vars", "synth_vars and synth_state must be positive"));
                }
                if !(0.0 <= self.synth_radius_min && self.synth_radius_min <= self.synth_radius_max && self.synth_radius_max < 1.0) {
                    return Err(field("synth_radius_max", "need 0 <= synth_radius_min <= synth_radius_max < 1"));
                }
                if !(self.synth_process_noise >= 0.0) || !(self.synth_obs_noise >= 0.0) {
                    return Err(field("synth_process_noise", "noise levels must be >= 0"));
                }
            }
            "csv" => {
                if self.csv_path.is_none() {
                    return Err(field("csv_path", "required when data = \"csv\""));
                }
            }
            other => return Err(field("data", format!("expected \"synth\" or \"csv\", got {other:?}"))),
        }
        let (tr, va) = (self.train_fraction, self.val_fraction);
        if !(tr > 0.0 && va >= 0.0 && tr + va < 1.0) {
            return Err(field("train_fraction", format!("need train > 0, val >= 0, train + val < 1 (got {tr}, {va})")));
        }
        if self.stride == 0 {
            return Err(field("stride", "must be positive"));
        }
        if self.samples < 2 {
            return Err(field("samples", format!("CRPS needs at least 2 samples, got {}", self.samples)));
        }
        self.split()?;
        self.hyper_params()?
            .validate()
            .map_err(|e| CliError::config(format!("config: {e}")))
    }

    pub fn split(&self) -> Result<koopkal_core::data::Split> {
        use koopkal_core::data::Split;
        match self.forecast_split.as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(field("forecast_split", format!("expected train, val or test, got {other:?}"))),
        }
    }

    /// Number of series variables the data source yields (CSV needs a read).
    pub fn hyper_params_for(&self, n_vars: usize) -> Result<HyperParams> {
        let mut hp = self.hyper_params()?;
        hp.n_vars = n_vars;
        Ok(hp)
    }

    fn hyper_params(&self) -> Result<HyperParams> {
        let norm = NormMode::parse(&self.norm).map_err(|e| field("norm", e))?;
        let operator = match self.operator.as_str() {
            "mixed" => OperatorMode::Mixed,
            "local" => OperatorMode::LocalOnly,
            "global" => OperatorMode::GlobalOnly,
            other => return Err(field("operator", format!("expected mixed, local or global, got {other:?}"))),
        };
        let mut hp = HyperParams::new(self.synth_vars, self.context_len, self.horizon, self.patch, self.d_model);
        hp.lr = self.lr;
        hp.beta1 = self.beta1;
        hp.beta2 = self.beta2;
        hp.adam_eps = self.adam_eps;
        hp.beta_kl = self.beta_kl;
        hp.lambda_rec = self.lambda_rec;
        hp.lambda_ridge = self.lambda_ridge;
        hp.batch_size = self.batch_size;
        hp.epochs = self.epochs;
        hp.grad_clip = self.grad_clip;
        hp.val_samples = self.val_samples;
        hp.norm = norm;
        hp.variant = Variant { operator, integrator: self.integrator, skip: self.skip, control: self.control };
        Ok(hp)
    }

    pub fn synth_config(&self) -> LinearGaussianConfig {
        let mut c = LinearGaussianConfig::new(self.synth_state, self.synth_vars, self.synth_steps, self.synth_seed);
        c.radius = (self.synth_radius_min, self.synth_radius_max);
        c.process_noise = self.synth_process_noise;
        c.obs_noise = self.synth_obs_noise;
        c
    }

    pub fn fractions(&self) -> SplitFractions {
        SplitFractions { train: self.train_fraction, val: self.val_fraction }
    }
}

/// Splits `--key value` / `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| CliError::config(format!("unexpected argument {a:?}; overrides look like --key value")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.replace('-', "_"), v.to_string()));
            continue;
        }
        let v = it.next().ok_or_else(|| CliError::config(format!("override --{key} needs a value")))?;
        out.push((key.replace('-', "_"), v.clone()));
    }
    Ok(out)
}
