use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sahp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sahp")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a/data.jsonl");
    let b = dir.path().join("b/data.jsonl");
    for out in [&a, &b] {
        let o = sahp(&["simulate", "--horizon", "100", "--n", "40", "--seed", "1", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(dir.path().join("a/data.config.json").exists());

    let other = dir.path().join("c.jsonl");
    sahp(&["simulate", "--n", "40", "--seed", "2", "--out", p(&other)]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&other).unwrap());
}

#[test]
fn resolved_config_reproduces_output() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first.jsonl");
    let o = sahp(&["simulate", "--n", "20", "--horizon", "50", "--seed", "7", "--out", p(&first)]);
    assert!(o.status.success());
    let cfg = dir.path().join("first.config.json");
    let second = dir.path().join("second.jsonl");
    let o = sahp(&["simulate", "--config", p(&cfg), "--out", p(&second)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = sahp(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn missing_input_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = dir.path().join("r.json");
    let o = sahp(&["evaluate", "--model", "ckpt", "--data", p(&missing), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bad_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.jsonl");
    assert_eq!(sahp(&["simulate", "--n", "5"]).status.code(), Some(2));
    let o = sahp(&["simulate", "--n", "5", "--horizon", "-1", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = sahp(&["reproduce", "--scale", "0", "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fit_train_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let run = |args: &[&str]| {
        let o = sahp(args);
        assert!(o.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&o.stderr));
    };
    run(&["simulate", "--n", "30", "--seed", "3", "--split", "0.6,0.2,0.2", "--out", p(&data)]);
    let hp = dir.path().join("hp");
    run(&["fit-hp", "--data", p(&data), "--out-dir", p(&hp)]);
    let tr = dir.path().join("tr");
    run(&[
        "train", "--data", p(&data), "--out-dir", p(&tr), "--epochs", "1", "--model-dim", "8", "--workers", "2",
    ]);
    for f in ["checkpoint.json", "history.csv", "config.json"] {
        assert!(tr.join(f).exists(), "{f}");
    }
    let ckpt = tr.join("checkpoint.json");
    let hp_params = hp.join("hp_params.json");
    for model in [&ckpt, &hp_params] {
        let report = dir.path().join("report.json");
        run(&["evaluate", "--model", p(model), "--data", p(&data), "--out", p(&report)]);
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
        assert!(v["nll_per_event"].as_f64().unwrap().is_finite());
        let preds = dir.path().join("pred.csv");
        run(&["predict", "--model", p(model), "--data", p(&data), "--out", p(&preds)]);
        let qq = dir.path().join("qq.csv");
        run(&["qq", "--model", p(model), "--data", p(&data), "--out", p(&qq)]);
        assert_eq!(fs::read_to_string(&qq).unwrap().lines().count(), 1 + 2 * 99);
    }
    let attn = dir.path().join("attn.csv");
    run(&["attn", "--model", p(&ckpt), "--data", p(&data), "--out", p(&attn)]);
    let o = sahp(&["attn", "--model", p(&hp_params), "--data", p(&data), "--out", p(&attn)]);
    assert_eq!(o.status.code(), Some(2));
}
