use koopkal_core::data::{make_windows, synth_linear_gaussian, LinearGaussianConfig, Split, WindowSet};
use koopkal_core::koopman::OperatorMode;
use koopkal_core::model::{forward_pass, posterior_noise, sample_forecasts, HyperParams, ModelBundle, NormMode, Variant};
use koopkal_core::params::{gaussian, ParamSet};
use koopkal_core::tensor::gradcheck::finite_difference_check;
use koopkal_core::tokenizer::{Normalization, WindowBatch};
use koopkal_core::train::Trainer;
use koopkal_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_batch(rng: &mut ChaCha8Rng, b: usize, n: usize, t: usize, l: usize) -> WindowBatch {
    let ctx: Vec<Vec<f64>> = (0..b).map(|_| gaussian(rng, n * t, 1.0)).collect();
    let tgt: Vec<Vec<f64>> = (0..b).map(|_| gaussian(rng, n * l, 1.0)).collect();
    WindowBatch::from_windows(n, &ctx, &tgt).unwrap()
}

fn tiny_hp() -> HyperParams {
    HyperParams::new(2, 8, 8, 4, 6)
}

#[test]
fn output_shapes_follow_configuration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let hp = HyperParams::new(7, 96, 96, 16, 32);
    assert_eq!((hp.n_tokens(), hp.m_tokens()), (6, 6));
    let bundle = ModelBundle::init(hp.clone(), 1).unwrap();
    let batch = random_batch(&mut rng, 3, 7, 96, 96);
    let ps = bundle.params.bind(false).unwrap();
    let eps = posterior_noise(&mut rng, &hp, 3).unwrap();
    let out = forward_pass(&ps, &hp, &batch, &eps).unwrap();
    assert_eq!(out.mu.shape(), &[3, 7, 96]);
    assert_eq!(out.sigma.shape(), &[3, 7, 96]);
    assert!(out.sigma.data().iter().all(|&s| s > 0.0));
}

#[test]
fn invalid_configurations_are_rejected() {
    let mut hp = tiny_hp();
    hp.patch = 3;
    assert!(matches!(ModelBundle::init(hp, 0), Err(Error::Divisibility { len: 8, patch: 3 })));
    let mut hp = tiny_hp();
    hp.patch = 8;
    assert!(ModelBundle::init(hp.clone(), 0).is_err());
    hp.variant.operator = OperatorMode::GlobalOnly;
    assert!(ModelBundle::init(hp, 0).is_ok());
    let mut hp = tiny_hp();
    hp.beta_kl = -1.0;
    assert!(ModelBundle::init(hp, 0).is_err());
}

#[test]
fn forward_pass_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hp = tiny_hp();
    let batch = random_batch(&mut rng, 4, 2, 8, 8);
    let eps = Tensor::zeros(&[4, 6, 2]);
    let run = || {
        let bundle = ModelBundle::init(hp.clone(), 5).unwrap();
        let ps = bundle.params.bind(false).unwrap();
        forward_pass(&ps, &hp, &batch, &eps).unwrap().loss.total.item()
    };
    let a = run();
    assert!(a.is_finite());
    assert_eq!(a.to_bits(), run().to_bits());
}

#[test]
fn batch_shape_mismatch_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bundle = ModelBundle::init(tiny_hp(), 0).unwrap();
    let batch = random_batch(&mut rng, 2, 3, 8, 8);
    assert!(sample_forecasts(&bundle, &batch, 4, &mut rng).is_err());
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hp = tiny_hp();
    let bundle = ModelBundle::init(hp.clone(), 7).unwrap();
    let batch = random_batch(&mut rng, 2, 2, 8, 8);
    let eps = posterior_noise(&mut rng, &hp, 2).unwrap();
    let names = bundle.params.names();
    // a generic point: at initialization K_glo = 0 and the residual vanishes
    let values: Vec<Tensor> = bundle
        .params
        .iter()
        .map(|p| {
            let noise = gaussian(&mut rng, p.data.len(), 0.1);
            Tensor::new(&p.shape, p.data.iter().zip(noise).map(|(a, b)| a + b).collect()).unwrap()
        })
        .collect();
    let f = |vals: &[Tensor]| {
        let ps = ParamSet::with_names(&names, vals.to_vec());
        Ok(forward_pass(&ps, &hp, &batch, &eps)?.loss.total)
    };
    let report = finite_difference_check(f, &values, 1e-6, 1e-3).unwrap();
    for p in &report.params {
        assert!(p.passed, "{} rel err {}", names[p.index], p.max_rel_err);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for variant in [
        Variant::default(),
        Variant { integrator: false, ..Variant::default() },
        Variant { control: false, ..Variant::default() },
        Variant { operator: OperatorMode::GlobalOnly, ..Variant::default() },
    ] {
        let mut hp = tiny_hp();
        hp.variant = variant;
        let bundle = ModelBundle::init(hp.clone(), 8).unwrap();
        let batch = random_batch(&mut rng, 3, 2, 8, 8);
        let ps = bundle.params.bind(true).unwrap();
        let eps = posterior_noise(&mut rng, &hp, 3).unwrap();
        forward_pass(&ps, &hp, &batch, &eps).unwrap().loss.total.backward().unwrap();
        for (name, g) in bundle.params.names().iter().zip(ps.grads()) {
            let g = g.unwrap_or_else(|| panic!("{} has no gradient in {}", name, variant.name()));
            assert!(g.iter().any(|v| *v != 0.0), "{name} gradient is zero in {}", variant.name());
        }
    }
}

fn tiny_linear_data(seed: u64) -> (WindowSet, WindowSet, (Vec<f64>, Vec<f64>)) {
    let (ds, _) = synth_linear_gaussian(&LinearGaussianConfig::new(2, 2, 400, seed)).unwrap();
    let train = make_windows(&ds, 8, 8, 1, Split::Train).unwrap();
    let val = make_windows(&ds, 8, 8, 8, Split::Val).unwrap();
    (train, val, ds.split_stats(Split::Train).unwrap())
}

#[test]
fn zero_epoch_run_returns_initial_model() {
    let (train, val, _) = tiny_linear_data(0);
    let mut hp = tiny_hp();
    hp.epochs = 0;
    let bundle = ModelBundle::init(hp, 1).unwrap();
    let mut tr = Trainer::new(bundle.clone(), 1);
    let logs = tr.train(&train, Some(&val), |_| {}).unwrap();
    assert!(logs.is_empty());
    assert_eq!(tr.best_bundle(), bundle);
}

#[test]
fn training_reduces_loss() {
    let (train, val, stats) = tiny_linear_data(1);
    let mut hp = tiny_hp();
    hp.epochs = 50;
    hp.norm = NormMode::Global;
    let mut bundle = ModelBundle::init(hp, 2).unwrap();
    bundle.norm_stats = Some(stats);
    let mut tr = Trainer::new(bundle, 2);
    let logs = tr.train(&train, Some(&val), |_| {}).unwrap();
    assert_eq!(logs.len(), 50);
    assert!(logs[49].loss < logs[0].loss, "{} vs {}", logs[49].loss, logs[0].loss);
    assert!(logs.iter().all(|l| l.u_norm.is_finite() && l.val_crps.unwrap().is_finite()));
    let best = tr.best.as_ref().unwrap();
    assert!(logs.iter().all(|l| l.val_crps.unwrap() >= best.val_crps));
}

#[test]
fn resumed_trainer_continues_identically() {
    let (train, val, _) = tiny_linear_data(2);
    let mut hp = tiny_hp();
    hp.epochs = 3;
    let mut full = Trainer::new(ModelBundle::init(hp, 3).unwrap(), 3);
    full.run_epoch(&train, Some(&val)).unwrap();
    let mut resumed = full.clone();
    let a = full.train(&train, Some(&val), |_| {}).unwrap();
    let b = resumed.train(&train, Some(&val), |_| {}).unwrap();
    assert_eq!(a, b);
    assert_eq!(full, resumed);
}

#[test]
fn forecasts_use_fixed_statistics_when_configured() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hp = tiny_hp();
    hp.norm = NormMode::Global;
    let mut bundle = ModelBundle::init(hp, 0).unwrap();
    assert!(bundle.normalization().is_err());
    bundle.norm_stats = Some((vec![1.0, 2.0], vec![3.0, 4.0]));
    assert_eq!(bundle.normalization().unwrap(), Normalization::Fixed { mean: vec![1.0, 2.0], std: vec![3.0, 4.0] });
    let batch = random_batch(&mut rng, 2, 2, 8, 8);
    let d = sample_forecasts(&bundle, &batch, 3, &mut rng).unwrap();
    assert_eq!(d.paths.len(), 2 * 3 * 2 * 8);
}
