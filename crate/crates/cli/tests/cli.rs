use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wpa_core::checkpoint::{save_model, write_file};
use wpa_core::model::{Model, ModelSpec, HEAD_PREFIX};
use wpa_core::Tensor;

fn wp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wp")).args(args).current_dir(dir).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("cfg.json");
    fs::write(
        &path,
        format!(
            r#"{{
                "dataset": {{"kind": "synthetic", "n_per_class": 12, "classes": 4, "bias": 0.9}},
                "model": {{"kind": "small_cnn", "channels": [4]}},
                "train": {{"epochs": 2, "batch_size": 16, "lr": 0.05, "augment": false}},
                "out_dir": "run"{extra}
            }}"#
        ),
    )
    .unwrap();
    path
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&read(path)).unwrap()
}

#[test]
fn vanilla_run_marks_mode_and_leaves_wp_columns_empty() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "");
    ok(&wp(&["train", "--config", "cfg.json", "--p", "0"], dir.path()));
    let summary = json(dir.path().join("run/summary.json"));
    assert_eq!(summary["mode"], "vanilla");
    assert_eq!(summary["wp_phases"], 0);
    let csv = read(dir.path().join("run/epochs.csv"));
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# config_sha256="));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    for row in lines {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), header.len());
        for (h, c) in header.iter().zip(&cells) {
            if h.starts_with("wp_loss") || h.contains("uniformity") || *h == "drift_wp" || *h == "post_wp_test_error" {
                assert!(c.is_empty(), "{h} = {c:?}");
            }
        }
        assert_eq!(cells[4], "false");
    }
    for f in ["config.json", "drift.csv", "reliability.csv", "model_final.wpck", "model_eval.wpck"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
}

#[test]
fn lambda_sweep_writes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), r#", "sweep": {"lambda": [0.0, 0.5, 1.0]}"#);
    ok(&wp(&["train", "--config", "cfg.json", "--epochs", "1"], dir.path()));
    for name in ["lambda0", "lambda0.5", "lambda1"] {
        let cell = dir.path().join("run").join(name);
        assert!(cell.join("summary.json").exists(), "{name}");
        let cfg = json(cell.join("config.json"));
        assert_eq!(cfg["dataset"]["seed"], 0);
        assert_eq!(cfg["train"]["seed"], 0);
    }
    let sweep = read(dir.path().join("run/sweep.csv"));
    assert_eq!(sweep.lines().count(), 5);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "");
    ok(&wp(&["train", "--config", "cfg.json", "--seed", "4", "--out", "a"], dir.path()));
    ok(&wp(&["train", "--config", "cfg.json", "--seed", "4", "--out", "b"], dir.path()));
    for f in ["epochs.csv", "drift.csv", "reliability.csv", "summary.json", "model_final.wpck"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    ok(&wp(&["train", "--config", "cfg.json", "--seed", "5", "--out", "c"], dir.path()));
    assert_ne!(read(dir.path().join("a/epochs.csv")), read(dir.path().join("c/epochs.csv")));
}

#[test]
fn probe_on_zero_head_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "");
    let mut model = Model::build(&ModelSpec::SmallCnn { channels: vec![4] }, [3, 32, 32], 4, 0).unwrap();
    for (name, t, _) in model.params_mut().iter_mut() {
        if name.starts_with(HEAD_PREFIX) {
            t.data_mut().fill(0.0);
        }
    }
    save_model(&model, &dir.path().join("zero.wpck")).unwrap();
    let image = Tensor::from_fn(&[3, 32, 32], |i| (i % 7) as f32 / 7.0);
    write_file(&dir.path().join("img.wpck"), [("image", &image)]).unwrap();

    for extra in [&[][..], &["--image", "img.wpck"][..]] {
        let mut args = vec!["probe", "--config", "cfg.json", "--checkpoint", "zero.wpck", "--k", "4", "--out", "p"];
        args.extend_from_slice(extra);
        ok(&wp(&args, dir.path()));
        let report = json(dir.path().join("p/probe.json"));
        let topk = report["topk"].as_array().unwrap();
        assert_eq!(topk.len(), 4);
        for (i, c) in topk.iter().enumerate() {
            assert_eq!(c["class"], i);
            assert!((c["confidence"].as_f64().unwrap() - 0.25).abs() < 1e-6);
        }
        assert!(report["uniformity"].as_f64().unwrap().abs() < 1e-6);
    }
}

#[test]
fn identity_corruption_matches_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), r#", "diagnostics": {"corruptions": ["identity", "contrast"]}"#);
    ok(&wp(&["train", "--config", "cfg.json", "--p", "0"], dir.path()));
    ok(&wp(&["corrupt-eval", "--config", "cfg.json", "--checkpoint", "run/model_eval.wpck", "--out", "ce"], dir.path()));
    let out = json(dir.path().join("ce/corruption_summary.json"));
    let clean = out["clean_error"][0].as_f64().unwrap();
    assert_eq!(out["ce"][0]["corruption"], "identity");
    assert!((out["ce"][0]["ce"].as_f64().unwrap() - clean).abs() < 1e-6);
    let csv = read(dir.path().join("ce/corruption.csv"));
    assert_eq!(csv.lines().count(), 2 + 5 * 2);
}

#[test]
fn splice_of_identical_checkpoints_and_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "");
    ok(&wp(&["train", "--config", "cfg.json"], dir.path()));
    let ck = "run/model_eval.wpck";
    ok(&wp(&["splice", "--config", "cfg.json", "--pre", ck, "--post", ck, "--out", "s"], dir.path()));
    let s = json(dir.path().join("s/splice.json"));
    let a = s["pre_conv_pre_head"].as_f64().unwrap();
    for k in ["post_conv_post_head", "pre_conv_post_head", "post_conv_pre_head"] {
        assert_eq!(s[k].as_f64().unwrap(), a, "{k}");
    }
    ok(&wp(&["calibrate", "--config", "cfg.json", "--checkpoint", ck, "--bins", "10", "--out", "c"], dir.path()));
    let c = json(dir.path().join("c/calibration.json"));
    assert_eq!(c["bins"], 10);
    let summary = json(dir.path().join("run/summary.json"));
    assert_eq!(c["test_error"], summary["final_test_error"]);
}

#[test]
fn longtail_gen_writes_usable_containers() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "");
    ok(&wp(&["longtail-gen", "--config", "cfg.json", "--rho", "4", "--out", "lt"], dir.path()));
    let spec = json(dir.path().join("lt/longtail.json"));
    assert_eq!(spec["counts"], serde_json::json!([12, 8, 5, 3]));
    fs::write(
        dir.path().join("lt.json"),
        r#"{"dataset": {"kind": "container", "train": "lt/longtail_train.wpds", "test": "lt/test.wpds"},
            "model": {"kind": "mlp", "hidden": [8]},
            "train": {"epochs": 1, "batch_size": 8, "augment": false}, "out_dir": "ltrun"}"#,
    )
    .unwrap();
    ok(&wp(&["train", "--config", "lt.json"], dir.path()));
    assert_eq!(json(dir.path().join("ltrun/summary.json"))["train_len"], 28);
}

#[test]
fn invalid_config_lists_fields_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), r#", "wp": {"p": 1.5, "m": 0}, "sweep": {"p": []}"#);
    let out = wp(&["train", "--config", "cfg.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for field in ["wp.p", "wp.m", "sweep.p"] {
        assert!(err.contains(field), "{err}");
    }
    let out = wp(&["train", "--config", "cfg.json", "--p", "0.5"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    config(dir.path(), "");
    let out = Command::new(env!("CARGO_BIN_EXE_wp"))
        .args(["train", "--config", "cfg.json"])
        .env("WP_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn incompatible_checkpoint_names_expected_architecture() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "");
    let other = Model::build(&ModelSpec::Mlp { hidden: vec![3] }, [3, 32, 32], 4, 0).unwrap();
    save_model(&other, &dir.path().join("mlp.wpck")).unwrap();
    for ck in ["mlp.wpck", "missing.wpck"] {
        let out = wp(&["calibrate", "--config", "cfg.json", "--checkpoint", ck, "--out", "c"], dir.path());
        assert_eq!(out.status.code(), Some(1));
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("small_cnn(channels=[4])"), "{err}");
    }
}

#[test]
fn divergence_exits_3_with_epoch() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "");
    let text = read(dir.path().join("cfg.json")).replace("\"lr\": 0.05", "\"lr\": 1e30, \"momentum\": 0.0");
    fs::write(dir.path().join("cfg.json"), text).unwrap();
    let out = wp(&["train", "--config", "cfg.json", "--p", "0"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch 0"));
}
