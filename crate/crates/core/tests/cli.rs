use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_weightalign"));
    c.env_remove("DATA_ROOT");
    c
}

fn run(dir: &Path, args: &[&str], config: &Value) -> Output {
    let cfg = dir.join("config.in.json");
    std::fs::write(&cfg, serde_json::to_string_pretty(config).unwrap()).unwrap();
    bin().current_dir(dir).args(args).arg("--config").arg(&cfg).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_net(reparam: Value) -> Value {
    json!({
        "input_shape": [1, 6, 6], "classes": 3, "seed": 0,
        "layers": [
            {"kind": "conv", "filters": 4, "kernel": 3, "padding": 1, "reparameterizer": reparam},
            {"kind": "relu"}, {"kind": "maxpool", "pool": 2}, {"kind": "flatten"},
            {"kind": "classifier"}
        ]
    })
}

fn base_config() -> Value {
    json!({
        "name": "tiny",
        "dataset": {"kind": "synthetic", "train": 48, "test": 24, "shape": [1, 6, 6], "classes": 3},
        "network": small_net(json!({"kind": "weight_align"})),
        "train": {"batch_size": 16, "epochs": 2, "momentum": 0.9, "weight_decay": 5e-4, "seed": 0,
                  "lr": {"initial": 0.05, "decay_epochs": [1], "factor": 0.1}}
    })
}

#[test]
fn train_writes_one_json_line_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train", "--out", "o"], &base_config());
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = std::fs::read_to_string(dir.path().join("o/run.jsonl")).unwrap();
    let lines: Vec<Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["epoch"], 1);
    assert_eq!(lines[0]["label"], "tiny");
    assert_eq!(lines[0]["config"]["seed"], 0);
    let summary = std::fs::read_to_string(dir.path().join("o/summary.csv")).unwrap();
    assert!(summary.starts_with("label,seed,epochs"));
    for f in ["config.json", "records.json", "timing.json"] {
        assert!(dir.path().join("o").join(f).exists(), "{f}");
    }
}

#[test]
fn weight_align_on_classifier_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["network"]["layers"][4]["reparameterizer"] = json!({"kind": "weight_align"});
    let out = run(dir.path(), &["train", "--out", "o"], &cfg);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("WeightAlign must not be applied to the final classifier layer"));
}

#[test]
fn weight_align_beta_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["network"]["layers"][0]["reparameterizer"]["beta"] = json!(true);
    let out = run(dir.path(), &["train", "--out", "o"], &cfg);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("beta"));
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["network"] = small_net(json!({"kind": "none"}));
    cfg["train"]["lr"] = json!({"initial": 1e6, "decay_epochs": [], "factor": 0.1});
    cfg["train"]["batch_size"] = json!(4);
    cfg["train"]["epochs"] = json!(5);
    let out = run(dir.path(), &["train", "--out", "o"], &cfg);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let summary = std::fs::read_to_string(dir.path().join("o/summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().ends_with(",true"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["sweep"] = json!({"methods": ["wa", "frobnorm"], "batch_sizes": [8]});
    let out = run(dir.path(), &["sweep"], &cfg);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("frobnorm"));

    cfg["sweep"] = json!({"methods": [], "batch_sizes": [8]});
    assert_eq!(run(dir.path(), &["sweep"], &cfg).status.code(), Some(1));

    cfg["analyze"] = json!({"variants": []});
    assert_eq!(run(dir.path(), &["analyze"], &cfg).status.code(), Some(1));

    assert_eq!(run(dir.path(), &["train"], &json!({"train": 3})).status.code(), Some(1));
    let missing = bin().args(["train", "--config", "/nonexistent/x.json"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["dataset"] = json!({"kind": "mnist"});
    let out = run(dir.path(), &["train", "--dataset-root", "nowhere"], &cfg);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nowhere"), "{}", stderr(&out));
}

#[test]
fn verify_flags_the_control_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["verify", "--out", "v"], &json!({"verify": {"samples": 200000}}));
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FLAGGED (control)"));
    assert!(!stdout.contains("FAIL"));
    let results: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(dir.path().join("v/verify.json")).unwrap()).unwrap();
    assert!(results.iter().any(|r| r["control"] == true && r["pass"] == false));
}

#[test]
fn underpowered_verify_warns() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["verify", "--out", "v"], &json!({"verify": {"samples": 1000, "include_controls": false}}));
    assert!(stderr(&out).contains("warning"));
}

#[test]
fn sweep_skips_batch_norm_at_batch_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["network"] = small_net(json!({"kind": "none"}));
    cfg["train"]["epochs"] = json!(1);
    cfg["sweep"] = json!({"methods": ["bn", "wa"], "batch_sizes": [16, 1]});
    let out = run(dir.path(), &["sweep", "--out", "s", "--jobs", "2"], &cfg);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("s/summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "method,batch_size,final_test_error,diverged,skipped");
    assert_eq!(rows.len(), 5);
    assert!(rows.contains(&"bn,1,,false,true"));
}

#[test]
fn ablation_records_each_multiplier() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg["train"]["epochs"] = json!(1);
    cfg["ablate"] = json!({"multipliers": [0.5, 1.0, 2.0]});
    let out = run(dir.path(), &["ablate", "--out", "a"], &cfg);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("a/summary.csv")).unwrap();
    let keys: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(keys, ["0.5", "1", "2"]);

    cfg["network"] = small_net(json!({"kind": "none"}));
    assert_eq!(run(dir.path(), &["ablate", "--out", "a"], &cfg).status.code(), Some(1));
}

#[test]
fn analyze_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"analyze": {"variants": ["wa", "bn"], "seeds": [0, 1],
        "drift": {"input_shape": [4, 6, 6], "batch": 16, "depth": 4, "width": 8, "probe_conv": 2, "channels": 4}}});
    let out = run(dir.path(), &["analyze", "--out", "a"], &cfg);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("a/drift.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/wa.json")).unwrap()).unwrap();
    assert!(!report["entries"].as_array().unwrap().is_empty());
    assert!(dir.path().join("a/bn.csv").exists());
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timing.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn reruns_are_byte_identical() {
    let mut cfg = base_config();
    cfg["sweep"] = json!({"methods": ["wa", "gn"], "batch_sizes": [16, 4]});
    cfg["analyze"] = json!({"variants": ["baseline"], "drift": {"input_shape": [4, 6, 6], "batch": 8, "depth": 3, "width": 4, "probe_conv": 1, "channels": 2}});
    cfg["verify"] = json!({"samples": 20000});
    for cmd in ["train", "sweep", "analyze", "verify"] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [&a, &b] {
            let out = run(d.path(), &[cmd, "--out", "o", "--seed", "5"], &cfg);
            assert!(out.status.success(), "{cmd}: {}", stderr(&out));
        }
        let (x, y) = (artifacts(&a.path().join("o")), artifacts(&b.path().join("o")));
        assert!(!x.is_empty());
        assert_eq!(x, y, "{cmd} artifacts differ");
    }
}

#[test]
fn seed_flag_changes_results() {
    let a = tempfile::tempdir().unwrap();
    let cfg = base_config();
    run(a.path(), &["train", "--out", "s1", "--seed", "1"], &cfg);
    run(a.path(), &["train", "--out", "s2", "--seed", "2"], &cfg);
    let r1 = std::fs::read_to_string(a.path().join("s1/records.json")).unwrap();
    let r2 = std::fs::read_to_string(a.path().join("s2/records.json")).unwrap();
    assert_ne!(r1, r2);
}

#[test]
fn shipped_configs_resolve() {
    use clap::Parser;
    use weightalign::cli::{Cli, ExperimentConfig};
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let cli = Cli::try_parse_from(["weightalign", "train"]).unwrap();
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.resolve(&cli).unwrap();
        n += 1;
    }
    assert!(n >= 5);
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(tmp.path())
        .args(["train", "--out", "o", "--config"])
        .arg(dir.join("synthetic_smoke.json"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
}
