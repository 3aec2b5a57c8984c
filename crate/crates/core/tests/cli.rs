//! End-to-end exercises of the `threes` binary: exit codes, artifact
//! contracts, and reproducibility of the persisted outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use threes_core::metrics::benign_accuracy;
use threes_core::nn::{ConvBlockConfig, Model, ModelConfig};
use threes_core::synth;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_threes")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

/// Small dataset + config for fast pipeline runs. Returns the config path.
fn setup(dir: &Path, epochs: usize, extra: serde_json::Value) -> PathBuf {
    let data = dir.join("data");
    synth::write_dataset(&data, 200, 80, 0).unwrap();
    let mut cfg = serde_json::json!({
        "dataset": {"manifest": data.join("manifest.json"), "train_limit": null, "test_limit": null},
        "model": {"conv_filters": [6], "dense_hidden": 24, "epochs": epochs,
                  "batch_size": 32, "learning_rate": 0.002},
        "trigger": {"delta": 2.0, "mode": "relative", "sample_count": 2},
        "poison": {"target_class": 3, "poison_rate": 0.1},
        "seed": 5,
        "out_dir": dir.join("out")
    });
    cfg.as_object_mut().unwrap().extend(extra.as_object().cloned().unwrap_or_default());
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn zero_epoch_train_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 0, serde_json::json!({}));
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let written = std::fs::read(dir.path().join("out/preliminary.ckpt")).unwrap();
    // reconstruct the initialization the binary should have produced
    let init = Model::init(ModelConfig {
        input_shape: (28, 28, 1),
        conv_blocks: vec![ConvBlockConfig { filters: 6 }],
        dense_hidden: 24,
        class_count: 10,
        seed: 5,
    });
    let ref_path = dir.path().join("reference.ckpt");
    init.save_checkpoint(&ref_path).unwrap();
    assert_eq!(written, std::fs::read(&ref_path).unwrap(), "untrained checkpoint ≠ initialization");
}

#[test]
fn missing_dataset_is_a_config_error_with_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    let out_dir = dir.path().join("out");
    let cfg = serde_json::json!({
        "dataset": {"manifest": dir.path().join("nope/manifest.json"),
                    "train_limit": null, "test_limit": null},
        "model": {"conv_filters": [6], "dense_hidden": 24, "epochs": 1,
                  "batch_size": 32, "learning_rate": 0.002},
        "trigger": {"delta": 1.0, "mode": "relative"},
        "poison": {"target_class": 3, "poison_rate": 0.1},
        "seed": 5,
        "out_dir": out_dir
    });
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    let out = run(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists(), "failed run must not leave partial outputs");
}

#[test]
fn missing_config_flag_is_a_config_error() {
    assert_eq!(run(&["eval"]).status.code(), Some(2));
}

#[test]
fn defend_without_upstream_artifacts_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 1, serde_json::json!({}));
    let out = run(&["defend", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn reloaded_checkpoint_reproduces_reported_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 2, serde_json::json!({}));
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let reported: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("test accuracy: "))
        .expect("accuracy line")
        .parse()
        .unwrap();

    let model = Model::load_checkpoint(&dir.path().join("out/preliminary.ckpt")).unwrap();
    let test_set = synth::generate(80, 0u64.wrapping_add(0x5EED));
    let acc = benign_accuracy(&model, &test_set).unwrap();
    assert!((acc - reported).abs() < 5e-5, "reload gives {acc}, binary reported {reported}");
}

fn run_pipeline(cfg: &Path, with_eval: bool) {
    for stage in ["train", "extract", "poison"] {
        let out = run(&[stage, "--config", cfg.to_str().unwrap()]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    if with_eval {
        let out = run(&["eval", "--config", cfg.to_str().unwrap()]);
        assert!(out.status.success(), "eval: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn rho_sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let cfg = setup(dir.path(), 1, serde_json::json!({"sweeps": {"rho": grid}}));
    run_pipeline(&cfg, true);

    let csv = std::fs::read_to_string(dir.path().join("out/sweeps/rho.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 9, "header plus one row per sweep value");
    assert!(lines[0].starts_with("rho,"));
    for (line, expect) in lines[1..].iter().zip(&grid) {
        let first: f64 = line.split(',').next().unwrap().parse().unwrap();
        assert_eq!(first, *expect);
    }
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["sweeps"][0]["points"].as_array().unwrap().len(), 9);
}

#[test]
fn clean_eval_reports_accuracy_but_no_asr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 1, serde_json::json!({"poison": {"target_class": 3, "poison_rate": 0.0}}));
    run_pipeline(&cfg, true);

    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/eval.json")).unwrap()).unwrap();
    assert!(eval["asr"].is_null(), "no poisoning → no attack success rate");
    assert!(eval["psnr_stats"].is_null());
    assert!(eval["benign_accuracy"].as_f64().is_some());
    assert!(eval["clean_control_accuracy"].as_f64().is_some());
}

#[test]
fn identical_configs_in_two_out_dirs_yield_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 1, serde_json::json!({}));
    let out_a = dir.path().join("run_a");
    let out_b = dir.path().join("run_b");
    for out in [&out_a, &out_b] {
        for stage in ["train", "extract", "poison", "eval"] {
            let r = run(&[
                stage,
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--determinism",
            ]);
            assert!(r.status.success(), "{stage}: {}", String::from_utf8_lossy(&r.stderr));
        }
    }
    for artifact in [
        "trigger.json",
        "poisoned/train-images.idx",
        "poisoned/train-labels.idx",
        "poisoned/provenance.json",
        "eval.json",
        "eval.csv",
        "preliminary.ckpt",
        "victim.ckpt",
    ] {
        let a = std::fs::read(out_a.join(artifact)).unwrap();
        let b = std::fs::read(out_b.join(artifact)).unwrap();
        assert_eq!(a, b, "{artifact} differs between identical runs");
    }
}
