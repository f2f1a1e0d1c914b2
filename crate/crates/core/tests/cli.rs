use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn protoehr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoehr"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_and_config_errors_are_json() {
    let out = protoehr(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\ndim = 0\n").unwrap();
    let out = protoehr(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "model");

    let out = protoehr(&["train", "--data", "/nonexistent/dir", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("nonexistent"));
}

#[test]
fn train_evaluate_ablate_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    std::fs::write(
        dir.path().join("exp.toml"),
        "[data.generator]\nn_patients = 150\n[model]\ndim = 8\ncode_protos = 2\nvisit_protos = 2\npatient_protos = 2\n[train]\nmax_epochs = 2\n[evaluate]\nbootstrap = 10\n",
    )
    .unwrap();
    let cfg = p("exp.toml");
    let run = |args: &[&str]| {
        let out = protoehr(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["gen-data", "--config", &cfg, "--out", &p("data")]);
    run(&["build-kg", "--config", &cfg, "--data", &p("data"), "--mock", "--out", &p("kg")]);
    run(&["train", "--config", &cfg, "--data", &p("data"), "--kg", &p("kg/kg.tsv"), "--out", &p("run")]);
    run(&[
        "evaluate", "--config", &cfg, "--data", &p("data"), "--kg", &p("kg/kg.tsv"), "--checkpoint", &p("run/model.json"),
        "--out", &p("eval"),
    ]);
    run(&["ablate", "--config", &cfg, "--data", &p("data"), "--what", "code-proto", "--seeds", "2", "--out", &p("abl")]);

    let manifest = json(&dir.path().join("run/run_manifest.json"));
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    let reports = json(&dir.path().join("eval/metrics.json"));
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for r in reports {
        assert_eq!(r["n_resamples"], 10);
        assert!(r["mean"].is_number() || r["mean"].is_null());
    }
    let traces = std::fs::read_to_string(dir.path().join("eval/traces.jsonl")).unwrap();
    let first: Value = serde_json::from_str(traces.lines().next().unwrap()).unwrap();
    let beta: f64 = first["beta"].as_array().unwrap().iter().map(|b| b.as_f64().unwrap()).sum();
    assert!((beta - 1.0).abs() < 1e-6);

    let abl = json(&dir.path().join("abl/ablation.json"));
    assert_eq!(abl["seeds"].as_array().unwrap().len(), 2);
    assert!(abl["metrics"]["auprc"]["full"]["values"].is_array());
}
