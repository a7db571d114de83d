//! Checkpoint pair: `<stem>.toml` manifest and `<stem>.bin` little-endian
//! f64 blob. Every tensor entry carries a sha256 of its bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use koopkal_core::koopman::OperatorMode;
use koopkal_core::model::{HyperParams, ModelBundle, NormMode, Variant};
use koopkal_core::optim::AdamState;
use koopkal_core::params::ParamStore;
use koopkal_core::train::{BestSnapshot, Trainer};

use crate::error::{CliError, Result};

pub const FORMAT: &str = "koopkal-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    blob: String,
    blob_bytes: u64,
    hyperparameters: HpRecord,
    trainer: TrainerRecord,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HpRecord {
    n_vars: usize,
    context_len: usize,
    horizon: usize,
    patch: usize,
    d_model: usize,
    n_tokens: usize,
    m_tokens: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    adam_eps: f64,
    beta_kl: f64,
    lambda_rec: f64,
    lambda_ridge: f64,
    batch_size: usize,
    epochs: usize,
    grad_clip: f64,
    val_samples: usize,
    norm: String,
    operator: String,
    integrator: bool,
    skip: bool,
    control: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerRecord {
    epoch: usize,
    seed: u64,
    adam_step: u64,
    best_epoch: Option<usize>,
    best_val_crps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
    sha256: String,
}

fn operator_name(op: OperatorMode) -> &'static str {
    match op {
        OperatorMode::Mixed => "mixed",
        OperatorMode::LocalOnly => "local",
        OperatorMode::GlobalOnly => "global",
    }
}

impl HpRecord {
    fn from_hp(hp: &HyperParams) -> HpRecord {
        HpRecord {
            n_vars: hp.n_vars,
            context_len: hp.context_len,
            horizon: hp.horizon,
            patch: hp.patch,
            d_model: hp.d_model,
            n_tokens: hp.n_tokens(),
            m_tokens: hp.m_tokens(),
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
            operator: operator_name(hp.variant.operator).into(),
            integrator: hp.variant.integrator,
            skip: hp.variant.skip,
            control: hp.variant.control,
        }
    }

    fn to_hp(&self) -> Result<HyperParams> {
        let bad = |m: String| CliError::config(format!("checkpoint hyperparameters: {m}"));
        let operator = match self.operator.as_str() {
            "mixed" => OperatorMode::Mixed,
            "local" => OperatorMode::LocalOnly,
            "global" => OperatorMode::GlobalOnly,
            o => return Err(bad(format!("unknown operator {o:?}"))),
        };
        let mut hp = HyperParams::new(self.n_vars, self.context_len, self.horizon, self.patch, self.d_model);
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
        hp.norm = NormMode::parse(&self.norm).map_err(|e| bad(e.to_string()))?;
        hp.variant = Variant { operator, integrator: self.integrator, skip: self.skip, control: self.control };
        hp.validate().map_err(|e| bad(e.to_string()))?;
        if hp.n_tokens() != self.n_tokens || hp.m_tokens() != self.m_tokens {
            return Err(bad(format!(
                "token counts n={}, m={} disagree with T/s={}, L/s={}",
                self.n_tokens,
                self.m_tokens,
                hp.n_tokens(),
                hp.m_tokens()
            )));
        }
        Ok(hp)
    }
}

/// Manifest and blob paths for a checkpoint stem (extension ignored).
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("toml"), stem.with_extension("bin"))
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct BlobWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl BlobWriter {
    fn push(&mut self, name: String, shape: &[usize], data: &[f64]) {
        let offset = self.bytes.len() as u64;
        let start = self.bytes.len();
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        let sha256 = digest(&self.bytes[start..]);
        self.entries.push(TensorEntry { name, shape: shape.to_vec(), offset, len: data.len() as u64, sha256 });
    }
}

/// Writes the full trainer state: parameters, optimizer moments, best
/// snapshot and normalization statistics.
pub fn save(trainer: &Trainer, stem: &Path) -> Result<()> {
    let (manifest_path, blob_path) = paths(stem);
    let mut w = BlobWriter { bytes: Vec::new(), entries: Vec::new() };
    let params = &trainer.bundle.params;
    for p in params.iter() {
        w.push(format!("param/{}", p.name), &p.shape, &p.data);
    }
    for (p, (m, v)) in params.iter().zip(trainer.adam.m.iter().zip(&trainer.adam.v)) {
        w.push(format!("adam.m/{}", p.name), &p.shape, m);
        w.push(format!("adam.v/{}", p.name), &p.shape, v);
    }
    if let Some(best) = &trainer.best {
        for p in best.params.iter() {
            w.push(format!("best/{}", p.name), &p.shape, &p.data);
        }
    }
    if let Some((mean, std)) = &trainer.bundle.norm_stats {
        w.push("norm/mean".into(), &[mean.len()], mean);
        w.push("norm/std".into(), &[std.len()], std);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        blob: blob_path.file_name().expect("file name").to_string_lossy().into_owned(),
        blob_bytes: w.bytes.len() as u64,
        hyperparameters: HpRecord::from_hp(&trainer.bundle.hp),
        trainer: TrainerRecord {
            epoch: trainer.epoch,
            seed: trainer.seed,
            adam_step: trainer.adam.step,
            best_epoch: trainer.best.as_ref().map(|b| b.epoch),
            best_val_crps: trainer.best.as_ref().map(|b| b.val_crps),
        },
        tensors: w.entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Runtime(format!("manifest: {e}")))?;
    std::fs::write(&blob_path, &w.bytes).map_err(|e| CliError::io(&blob_path, e))?;
    std::fs::write(&manifest_path, text).map_err(|e| CliError::io(&manifest_path, e))
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::config(format!("checkpoint {}: {msg}", path.display()))
}

/// Reads a checkpoint written by [`save`] and rebuilds the trainer.
pub fn load(stem: &Path) -> Result<Trainer> {
    let (manifest_path, default_blob) = paths(stem);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| corrupt(&manifest_path, e))?;
    let head: toml::Table = text.parse().map_err(|e| corrupt(&manifest_path, e))?;
    match (head.get("format").and_then(|v| v.as_str()), head.get("version").and_then(|v| v.as_integer())) {
        (Some(FORMAT), Some(v)) if v == VERSION as i64 => {}
        (Some(FORMAT), Some(v)) => {
            return Err(corrupt(&manifest_path, format!("format version {v} is not supported (expected {VERSION})")))
        }
        _ => return Err(corrupt(&manifest_path, "not a koopkal checkpoint manifest")),
    }
    let manifest: Manifest = toml::from_str(&text).map_err(|e| corrupt(&manifest_path, e))?;
    let blob_path = default_blob.with_file_name(&manifest.blob);
    let bytes = std::fs::read(&blob_path).map_err(|e| corrupt(&blob_path, e))?;
    if (bytes.len() as u64) < manifest.blob_bytes {
        return Err(corrupt(&blob_path, format!("truncated: {} of {} bytes", bytes.len(), manifest.blob_bytes)));
    }
    if bytes.len() as u64 != manifest.blob_bytes {
        return Err(corrupt(&blob_path, format!("size {} does not match manifest ({} bytes)", bytes.len(), manifest.blob_bytes)));
    }
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if n as u64 != e.len {
            return Err(corrupt(&manifest_path, format!("{}: shape {:?} holds {n} values, not {}", e.name, e.shape, e.len)));
        }
        let (a, b) = (e.offset as usize, e.offset as usize + 8 * n);
        if b > bytes.len() {
            return Err(corrupt(&blob_path, format!("truncated inside tensor {}", e.name)));
        }
        if digest(&bytes[a..b]) != e.sha256 {
            return Err(corrupt(&blob_path, format!("checksum mismatch in tensor {}", e.name)));
        }
        let data = bytes[a..b].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((e.name.clone(), e.shape.clone(), data));
    }
    let hp = manifest.hyperparameters.to_hp()?;
    let take = |prefix: &str| -> Vec<&(String, Vec<usize>, Vec<f64>)> {
        tensors.iter().filter(|(n, _, _)| n.starts_with(prefix)).collect()
    };
    let mut params = ParamStore::new();
    for (name, shape, data) in take("param/") {
        params.insert(&name["param/".len()..], shape, data.clone()).map_err(|e| corrupt(&manifest_path, e))?;
    }
    let reference = ModelBundle::init(hp.clone(), 0).map_err(|e| corrupt(&manifest_path, e))?;
    for (want, got) in reference.params.iter().zip(params.iter()) {
        if want.name != got.name || want.shape != got.shape {
            return Err(corrupt(
                &manifest_path,
                format!("parameter {} {:?} where the model expects {} {:?}", got.name, got.shape, want.name, want.shape),
            ));
        }
    }
    if reference.params.len() != params.len() {
        return Err(corrupt(
            &manifest_path,
            format!("{} parameters stored, the model has {}", params.len(), reference.params.len()),
        ));
    }
    let moments = |kind: &str| -> Result<Vec<Vec<f64>>> {
        params
            .iter()
            .map(|p| {
                let key = format!("{kind}/{}", p.name);
                tensors
                    .iter()
                    .find(|(n, _, _)| *n == key)
                    .map(|(_, _, d)| d.clone())
                    .ok_or_else(|| corrupt(&manifest_path, format!("missing tensor {key}")))
            })
            .collect()
    };
    let adam = AdamState {
        lr: hp.lr,
        beta1: hp.beta1,
        beta2: hp.beta2,
        eps: hp.adam_eps,
        step: manifest.trainer.adam_step,
        m: moments("adam.m")?,
        v: moments("adam.v")?,
    };
    let best = match (manifest.trainer.best_epoch, manifest.trainer.best_val_crps) {
        (Some(epoch), Some(val_crps)) => {
            let mut bp = ParamStore::new();
            for (name, shape, data) in take("best/") {
                bp.insert(&name["best/".len()..], shape, data.clone()).map_err(|e| corrupt(&manifest_path, e))?;
            }
            if bp.names() != params.names() {
                return Err(corrupt(&manifest_path, "best snapshot does not match the parameter list"));
            }
            Some(BestSnapshot { epoch, val_crps, params: bp })
        }
        _ => None,
    };
    let norm = |key: &str| tensors.iter().find(|(n, _, _)| n == key).map(|(_, _, d)| d.clone());
    let norm_stats = match (norm("norm/mean"), norm("norm/std")) {
        (Some(m), Some(s)) if m.len() == hp.n_vars && s.len() == hp.n_vars => Some((m, s)),
        (None, None) => None,
        _ => return Err(corrupt(&manifest_path, "normalization statistics are incomplete")),
    };
    let bundle = ModelBundle { hp, params, norm_stats };
    Ok(Trainer { bundle, adam, epoch: manifest.trainer.epoch, seed: manifest.trainer.seed, best })
}

/// Fields that fix the parameter shapes and the data interface.
pub fn check_compatible(stored: &HyperParams, wanted: &HyperParams) -> Result<()> {
    let pairs = [
        ("n_vars", stored.n_vars, wanted.n_vars),
        ("context_len", stored.context_len, wanted.context_len),
        ("horizon", stored.horizon, wanted.horizon),
        ("patch", stored.patch, wanted.patch),
        ("d_model", stored.d_model, wanted.d_model),
    ];
    for (name, a, b) in pairs {
        if a != b {
            return Err(CliError::config(format!("hyperparameter mismatch: checkpoint has {name} = {a}, run expects {b}")));
        }
    }
    if stored.norm != wanted.norm {
        return Err(CliError::config(format!(
            "hyperparameter mismatch: checkpoint has norm = {}, run expects {}",
            stored.norm.name(),
            wanted.norm.name()
        )));
    }
    if stored.variant != wanted.variant {
        return Err(CliError::config(format!(
            "hyperparameter mismatch: checkpoint variant {}, run expects {}",
            stored.variant.name(),
            wanted.variant.name()
        )));
    }
    Ok(())
}

/// [`load`] followed by [`check_compatible`].
pub fn load_expecting(stem: &Path, wanted: &HyperParams) -> Result<Trainer> {
    let t = load(stem)?;
    check_compatible(&t.bundle.hp, wanted)?;
    Ok(t)
}
