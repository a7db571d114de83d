mod common;

use std::fs;

use common::*;
use koopkal::commands::{forecast_window, load_dataset};
use koopkal::config::RunConfig;
use koopkal::csvio::write_csv;
use koopkal_core::data::{make_windows, SeriesDataset, Split};
use koopkal_core::params::gaussian;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TINY: [&str; 12] = [
    "--epochs", "2", "--synth-steps", "400", "--context-len", "16", "--horizon", "16", "--patch", "4", "--d-model", "6",
];

fn args<'a>(head: &[&'a str], tail: &'a [String]) -> Vec<&'a str> {
    head.iter().copied().chain(tail.iter().map(|s| s.as_str())).collect()
}

fn tiny(cmd: &str, out: &std::path::Path, extra: &[&str]) -> std::process::Output {
    let out = out.to_str().unwrap();
    let mut a = vec![cmd, "--out", out];
    a.extend_from_slice(extra);
    a.extend_from_slice(&TINY);
    koopkal(&a)
}

#[test]
fn missing_config_exits_2_and_names_path() {
    let o = koopkal(&["train", "--config", "/definitely/missing.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/definitely/missing.toml"));
}

#[test]
fn usage_and_field_errors_exit_2() {
    assert_eq!(koopkal(&["frobnicate"]).status.code(), Some(2));
    let o = koopkal(&["train", "--patch", "5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = koopkal(&["train", "--learning-rate", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn train_is_reproducible_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = tiny("train", out, &["--seed", "7"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["checkpoint.toml", "checkpoint.bin", "config.toml", "train_log.jsonl"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let log = fs::read(a.join("train_log.jsonl")).unwrap();
    assert_eq!(log, fs::read(b.join("train_log.jsonl")).unwrap());
    assert_eq!(String::from_utf8_lossy(&log).lines().count(), 2);
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
    let first: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&log).lines().next().unwrap()).unwrap();
    for key in ["epoch", "loss", "nll", "kl", "rec", "val_crps", "u_norm", "k_spectral"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    let echo = RunConfig::load(Some(&a.join("config.toml")), &[]).unwrap();
    assert_eq!((echo.seed, echo.epochs, echo.d_model), (7, 2, 6));

    let c = tiny("train", &dir.path().join("c"), &["--seed", "8"]);
    assert!(c.status.success());
    assert_ne!(log, fs::read(dir.path().join("c/train_log.jsonl")).unwrap());
}

#[test]
fn evaluate_is_deterministic_and_checks_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(tiny("train", &run, &["--seed", "1"]).status.success());
    let o = tiny("evaluate", &run, &["--seed", "3", "--samples", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(run.join("metrics.json")).unwrap();
    assert!(tiny("evaluate", &run, &["--seed", "3", "--samples", "10"]).status.success());
    assert_eq!(first, fs::read(run.join("metrics.json")).unwrap());

    let m: serde_json::Value = serde_json::from_slice(&first).unwrap();
    for split in ["train", "val", "test"] {
        let s = &m["splits"][split];
        assert!(s["overall"]["crps"].as_f64().unwrap() > 0.0, "{split}");
        assert_eq!(s["per_horizon"].as_array().unwrap().len(), 16);
        assert_eq!(s["per_horizon"][15]["step"], 16);
    }

    let o = tiny("evaluate", &run, &["--samples", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("samples"));

    // width mismatch against the stored model
    let o = koopkal(&args(&["evaluate", "--out", run.to_str().unwrap()], &TINY.map(String::from)[..10])
        .into_iter()
        .chain(["--d-model", "8"])
        .collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("d_model"));
}

#[test]
fn resume_continues_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    assert!(tiny("train", &full, &["--seed", "2"]).status.success());
    let one: Vec<&str> = ["--seed", "2", "--epochs", "1"].to_vec();
    let mut a: Vec<&str> = vec!["train", "--out", part.to_str().unwrap()];
    a.extend(TINY.iter().copied());
    a.extend(one);
    assert!(koopkal(&a).status.success());
    let stem = part.join("checkpoint");
    let o = tiny("train", &part, &["--seed", "2", "--resume", stem.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(full.join("train_log.jsonl")).unwrap(), fs::read(part.join("train_log.jsonl")).unwrap());
    assert_eq!(fs::read(full.join("checkpoint.bin")).unwrap(), fs::read(part.join("checkpoint.bin")).unwrap());
}

#[test]
fn exact_model_on_noiseless_series_scores_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("rot.csv");
    write_csv(&csv, &rotation_series(400)).unwrap();
    let stem = save_bundle(&copy_last_patch_model(), dir.path());
    let out = dir.path().join("eval");
    let flags = plain_flags(&csv, &out);
    let a = args(&["evaluate", "--checkpoint", stem.to_str().unwrap(), "--samples", "50"], &flags);
    let o = koopkal(&a);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    for split in ["train", "val", "test"] {
        let crps = m["splits"][split]["overall"]["crps"].as_f64().unwrap();
        assert!(crps < 1e-3, "{split}: {crps}");
    }
}

#[test]
fn forecast_file_layout_and_quantile_order() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("rot.csv");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = rotation_series(400);
    let noisy: Vec<f64> = base.values().iter().zip(gaussian(&mut rng, 800, 0.3)).map(|(a, b)| a + b).collect();
    write_csv(&csv, &SeriesDataset::new(base.names.clone(), 400, noisy).unwrap()).unwrap();
    let stem = save_bundle(&climatology_model(&[0.0; 8], 0.3), dir.path());
    let out = dir.path().join("fc");
    let flags = plain_flags(&csv, &out);
    let o = koopkal(&args(&["forecast", "--checkpoint", stem.to_str().unwrap(), "--samples", "17", "--window", "2"], &flags));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("forecast.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let header = rows.headers().unwrap().clone();
    assert_eq!(header.len(), 7 + 17);
    assert_eq!(header.iter().filter(|h| h.starts_with("sample_")).count(), 17);
    let mut n = 0;
    for r in rows.records() {
        let r = r.unwrap();
        let (mid, lo, hi): (f64, f64, f64) = (r[4].parse().unwrap(), r[5].parse().unwrap(), r[6].parse().unwrap());
        assert!(lo <= mid && mid <= hi, "{lo} {mid} {hi}");
        n += 1;
    }
    assert_eq!(n, 2 * 16);

    let o = koopkal(&args(&["forecast", "--checkpoint", stem.to_str().unwrap(), "--window", "100000"], &flags));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("out of range"));
}

#[test]
fn interval_coverage_matches_nominal_level() {
    // periodic mean plus N(0, 0.5²) noise, forecast by its exact distribution
    let sigma = 0.5;
    let steps = 2000;
    let base = rotation_series(steps);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noisy: Vec<f64> = base.values().iter().zip(gaussian(&mut rng, 2 * steps, sigma)).map(|(a, b)| a + b).collect();
    let ds = SeriesDataset::new(base.names.clone(), steps, noisy).unwrap();
    // patch layout is variable-major: var 0 steps 0..4, then var 1
    let pattern = [1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
    let bundle = climatology_model(&pattern, sigma);
    let set = make_windows(&ds, 16, 16, 4, Split::Test).unwrap();
    assert!(set.starts.iter().all(|s| s % 4 == 0));
    let (mut inside, mut total) = (0usize, 0usize);
    for w in 0..set.len() {
        let f = forecast_window(&bundle, &ds, &set, w, 200, 5).unwrap();
        for v in 0..2 {
            for h in 0..16 {
                let (lo, _, hi) = f.interval(v, h);
                let y = f.observed[v * 16 + h];
                inside += usize::from(lo <= y && y <= hi);
                total += 1;
            }
        }
    }
    let coverage = 100.0 * inside as f64 / total as f64;
    eprintln!("coverage {coverage:.2}% over {total} points");
    assert!((coverage - 95.0).abs() <= 5.0, "coverage {coverage:.1}% over {total} points");
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "epochs = 1\nsynth_steps = 400\ncontext_len = 16\nhorizon = 16\npatch = 4\nd_model = 6\n").unwrap();
    let cfg = RunConfig::load(Some(&path), &[("epochs".into(), "3".into())]).unwrap();
    assert_eq!((cfg.epochs, cfg.synth_steps), (3, 400));
    let ds = load_dataset(&cfg).unwrap();
    assert_eq!((ds.n_vars(), ds.steps()), (4, 400));
    fs::write(&path, "epochs = \"three\"\n").unwrap();
    let e = RunConfig::load(Some(&path), &[]).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("epochs"), "{e}");
}

#[test]
fn selftest_passes_and_catches_an_injected_fault() {
    let o = koopkal(&["selftest"]);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{table}");
    assert_eq!(table.matches("PASS").count(), 5, "{table}");
    let o = koopkal(&["selftest", "--inject-joseph-sign-flip"]);
    assert_eq!(o.status.code(), Some(1));
    let table = String::from_utf8_lossy(&o.stdout);
    let row = table.lines().find(|l| l.starts_with("joseph")).unwrap();
    assert!(row.contains("FAIL"), "{table}");
    assert_eq!(table.matches("FAIL").count(), 1);
}
