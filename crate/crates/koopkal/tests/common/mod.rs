#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use koopkal::checkpoint;
use koopkal_core::data::SeriesDataset;
use koopkal_core::kalman::KalmanParams;
use koopkal_core::koopman::OperatorMode;
use koopkal_core::model::{HyperParams, ModelBundle, NormMode, Variant, EMBED_BIAS, EMBED_WEIGHT};
use koopkal_core::train::Trainer;
use koopkal_core::vae::DecoderHeads;

pub fn koopkal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koopkal")).args(args).output().expect("binary runs")
}

pub fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

fn eye(d: usize, v: f64) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = v;
    }
    m
}

/// `N = 2`, `T = L = 16`, `s = 4`, `d = N·s`, local operator, no integrator,
/// no normalization.
pub fn plain_hp() -> HyperParams {
    let mut hp = HyperParams::new(2, 16, 16, 4, 8);
    hp.norm = NormMode::None;
    hp.variant = Variant { operator: OperatorMode::LocalOnly, integrator: false, skip: true, control: true };
    hp
}

pub fn zero(bundle: &mut ModelBundle, name: &str) {
    let n = bundle.params.get(name).unwrap_or_else(|| panic!("no {name}")).data.len();
    bundle.params.set(name, vec![0.0; n]).unwrap();
}

/// A model whose mean path reproduces a patch-periodic series exactly: the
/// embedding and ψ are identities, tokens repeat, so the local operator is a
/// projection that keeps them; the filter has negligible noise and the mean
/// head un-embeds. The scale head outputs ≈ 1e-6.
pub fn copy_last_patch_model() -> ModelBundle {
    let hp = plain_hp();
    let d = hp.d_model;
    let mut b = ModelBundle::init(hp, 0).unwrap();
    b.params.set(EMBED_WEIGHT, eye(d, 1.0)).unwrap();
    zero(&mut b, EMBED_BIAS);
    zero(&mut b, "psi.l2.weight");
    zero(&mut b, "psi.l2.bias");
    b.params.set(KalmanParams::LQ, eye(d, softplus_inv(1e-5))).unwrap();
    b.params.set(KalmanParams::LR, eye(d, softplus_inv(1e-5))).unwrap();
    zero(&mut b, &format!("{}.l2.weight", DecoderHeads::MU));
    zero(&mut b, &format!("{}.l2.bias", DecoderHeads::MU));
    b.params.set(&format!("{}.skip.weight", DecoderHeads::MU), eye(d, 1.0)).unwrap();
    zero(&mut b, &format!("{}.l2.weight", DecoderHeads::SIGMA));
    b.params.set(&format!("{}.l2.bias", DecoderHeads::SIGMA), vec![-30.0; d]).unwrap();
    b
}

/// A model that ignores the context and predicts `N(pattern, sigma²)` for every
/// patch: zero embedding, constant mean head, constant scale head.
pub fn climatology_model(pattern: &[f64], sigma: f64) -> ModelBundle {
    let hp = plain_hp();
    let d = hp.d_model;
    assert_eq!(pattern.len(), d);
    let mut b = ModelBundle::init(hp, 0).unwrap();
    zero(&mut b, EMBED_WEIGHT);
    zero(&mut b, EMBED_BIAS);
    zero(&mut b, &format!("{}.l2.weight", DecoderHeads::MU));
    zero(&mut b, &format!("{}.skip.weight", DecoderHeads::MU));
    b.params.set(&format!("{}.l2.bias", DecoderHeads::MU), pattern.to_vec()).unwrap();
    zero(&mut b, &format!("{}.l2.weight", DecoderHeads::SIGMA));
    b.params.set(&format!("{}.l2.bias", DecoderHeads::SIGMA), vec![softplus_inv(sigma - 1e-6); d]).unwrap();
    b
}

pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> PathBuf {
    let stem = dir.join("model");
    checkpoint::save(&Trainer::new(bundle.clone(), 0), &stem).unwrap();
    stem
}

/// Quarter-turn rotation observed in both coordinates: `cos`, `sin` at
/// period 4.
pub fn rotation_series(steps: usize) -> SeriesDataset {
    koopkal_core::data::noiseless_linear(&[0.0, -1.0, 1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0], 2, steps).unwrap()
}

/// Config flags matching [`plain_hp`] on a CSV file.
pub fn plain_flags(csv: &Path, out: &Path) -> Vec<String> {
    [
        "--data", "csv", "--csv-path", csv.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--context-len", "16", "--horizon", "16", "--patch", "4", "--d-model", "8",
        "--norm", "none", "--operator", "local", "--integrator", "false", "--stride", "4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}
