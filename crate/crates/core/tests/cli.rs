use std::path::Path;
use std::process::{Command, Output};

use coda_core::config::RunConfig;
use coda_core::model::ModelConfig;
use coda_core::scenegen::DatasetConfig;
use serde_json::Value;

fn coda(args: &[&str], runs: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coda"))
        .args(args)
        .env("CODA_RUN_DIR", runs)
        .output()
        .unwrap()
}

fn json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn gen_train_eval_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut cfg = RunConfig::default();
    cfg.dataset = DatasetConfig {
        size: 16,
        source: 4,
        m1: 4,
        m2: 2,
        target: 4,
        eval_per_scene: 1,
        ..DatasetConfig::default()
    };
    cfg.model = ModelConfig::for_image(16);
    cfg.checkpoint_every = 0;
    let cfg = cfg.with_iters(4);
    let cfg_path = root.join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let (c, d, runs) = (cfg_path.to_str().unwrap(), root.join("data"), root.join("runs"));
    let d = d.to_str().unwrap();

    let g = json(&coda(&["gen-data", "--config", c, "--out", d], &runs));
    assert_eq!(g["train_samples"], 14);

    let t = json(&coda(&["train", "--config", c, "--data", d], &runs));
    assert_eq!(t["config_hash"], cfg.hash());
    let run_dir = t["run_dir"].as_str().unwrap().to_string();
    let ckpt = format!("{run_dir}/final.coda");

    let with = json(&coda(&["eval", "--ckpt", &ckpt, "--data", d, "--config", c], &runs));
    let without = json(&coda(&["eval", "--ckpt", &ckpt, "--data", d, "--no-savpt"], &runs));
    assert_eq!(with["savpt"], true);
    assert_eq!(without["savpt"], false);
    assert_eq!(with["overall"]["miou"], t["miou"]);
    for scene in ["fog", "rain", "snow", "night"] {
        assert!(with[scene]["miou"].is_number(), "{scene}");
    }

    let v = json(&coda(&["verify", &run_dir], &runs));
    assert_eq!(v["config_hash"], cfg.hash());

    let scan = json(&coda(&["severity-scan", "--data", d], &runs));
    assert_eq!(scan["total"], 14);

    // Same config, second run: identical history.
    let t2 = json(&coda(&["train", "--config", c, "--data", d], &runs));
    let hist = |dir: &str| std::fs::read(format!("{dir}/history.jsonl")).unwrap();
    assert_eq!(hist(&run_dir), hist(t2["run_dir"].as_str().unwrap()));

    let other = root.join("other.json");
    std::fs::write(&other, RunConfig { seed: 7, ..cfg.clone() }.to_json()).unwrap();
    let o = coda(
        &[
            "eval",
            "--ckpt",
            &ckpt,
            "--data",
            d,
            "--config",
            other.to_str().unwrap(),
        ],
        &runs,
    );
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "hash_mismatch");
}

#[test]
fn errors_are_one_json_line() {
    let tmp = tempfile::tempdir().unwrap();
    let o = coda(
        &["eval", "--ckpt", "/nonexistent.coda", "--data", "/nonexistent"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let text = String::from_utf8(o.stderr).unwrap();
    assert_eq!(text.trim().lines().count(), 1);
    let err: Value = serde_json::from_str(text.trim()).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string());

    let o = coda(&["ablate", "bogus"], tmp.path());
    assert_ne!(o.status.code(), Some(0));
}
