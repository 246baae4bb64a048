//! End-to-end runs of the `privsphere` binary on small synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn small_config(out: &Path) -> Value {
    json!({
        "dataset": {
            "synthetic": {
                "dim": 10, "utility_classes": 4, "privacy_classes": 2, "utility_dim": 4, "privacy_dim": 2,
                "encoding": "linear", "noise": 0.5, "samples": 240, "seed": 5,
                "utility_scale": 3.0, "privacy_scale": 2.0
            }
        },
        "model": { "funnel_dim": 6, "public_hidden": [16], "discriminator_hidden": [16] },
        "objective": { "kind": "mmd", "lambda_p": 0.5, "grid": [0.25, 1.0, 4.0] },
        "trainer": { "batch_size": 60, "epochs": 3 },
        "adversaries": { "members": ["logistic", "knn"], "logistic_iterations": 50, "folds": 2 },
        "output": { "dir": out.display().to_string(), "seed": 9 }
    })
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn privsphere(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privsphere"))
        .args(args)
        .env_remove("PRIVSPHERE_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", &small_config(&out));
    let o = privsphere(&["sweep", "--config", cfg.to_str().unwrap(), "--jobs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(text.lines().count(), 4, "{text}");
    assert!(text.starts_with("lambda_p,utility_acc,privacy_acc,logistic_acc,knn_acc,seed"));
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["sweep"]["seed"], 9);
    assert_eq!(manifest["sweep"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn grid_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", &small_config(&out));
    let o = privsphere(&["sweep", "--config", cfg.to_str().unwrap(), "--grid", "0.5,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("results.csv")).unwrap().lines().count(), 3);
}

#[test]
fn permutation_test_on_identical_groups_reports_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut cfg = small_config(&out);
    cfg["dataset"]["synthetic"]["noise"] = json!(0.0);
    cfg["dataset"]["synthetic"]["privacy_scale"] = json!(0.0);
    let path = write_config(dir.path(), "c.json", &cfg);
    let o = privsphere(&["permtest", "--config", path.to_str().unwrap(), "--permutations", "99"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("p-value 1"));
    assert_eq!(read_json(&out.join("permtest.json"))["p_value"], 1.0);
}

#[test]
fn projection_then_eval_beats_chance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", &small_config(&out));
    let o = privsphere(&["duca", "--config", cfg.to_str().unwrap(), "--lambda-p", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = out.join("checkpoint.json");
    let o = privsphere(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("eval.json"));
    let utility = report["utility_accuracy"].as_f64().unwrap();
    assert!(utility > 0.25 + 0.2, "{utility}");
    assert_ne!(report["checkpoint_config_hash"], report["config_hash"]);
    assert_eq!(read_json(&out.join("manifest.json"))["duca"]["artifacts"][0], "checkpoint.json");
}

#[test]
fn training_is_reproducible_and_output_dir_follows_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_config(&dir.path().join("ignored")));
    let mut checkpoints = Vec::new();
    for run in ["a", "b"] {
        let target = dir.path().join(run);
        let o = Command::new(env!("CARGO_BIN_EXE_privsphere"))
            .args(["train", "--config", cfg.to_str().unwrap()])
            .env("PRIVSPHERE_OUTPUT_DIR", &target)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(target.join("history.csv").exists());
        assert!(fs::read_to_string(target.join("run.log")).unwrap().contains("train config_hash="));
        checkpoints.push(fs::read(target.join("checkpoint.json")).unwrap());
    }
    assert!(!dir.path().join("ignored").exists());
    assert_eq!(checkpoints[0], checkpoints[1]);
    assert_eq!(
        fs::read(dir.path().join("a/manifest.json")).unwrap(),
        fs::read(dir.path().join("b/manifest.json")).unwrap()
    );
}

#[test]
fn synthetic_data_is_written_as_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", &small_config(&out));
    let dest = dir.path().join("d.csv");
    let o = privsphere(&["gen-synth", "--config", cfg.to_str().unwrap(), "--out", dest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&dest).unwrap();
    assert_eq!(text.lines().count(), 241);
    assert!(text.lines().next().unwrap().ends_with("utility,privacy"));
}

#[test]
fn configuration_errors_exit_with_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut bad = small_config(&out);
    bad["trainer"]["bogus"] = json!(1);
    let path = write_config(dir.path(), "bad.json", &bad);
    let o = privsphere(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("trainer.bogus"), "{}", stderr(&o));

    let good = write_config(dir.path(), "good.json", &small_config(&out));
    let o = privsphere(&["train", "--config", good.to_str().unwrap(), "--set", "trainer.batch_size=0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("trainer.batch_size"), "{}", stderr(&o));

    let mut no_weight = small_config(&out);
    no_weight["objective"].as_object_mut().unwrap().remove("lambda_p");
    let path = write_config(dir.path(), "nw.json", &no_weight);
    let o = privsphere(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("objective.lambda_p"), "{}", stderr(&o));

    let o = privsphere(&["sweep", "--config", good.to_str().unwrap(), "--set", "dataset.synthetic.privacy_dim=40"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dataset.synthetic.dim"), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", &small_config(&out));
    let missing = dir.path().join("missing.json");
    let o = privsphere(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn shipped_configs_load() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        let dir = tempfile::tempdir().unwrap();
        let o = privsphere(&[
            "gen-synth",
            "--config",
            path.to_str().unwrap(),
            "--output",
            dir.path().to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}: {}", path.display(), stderr(&o));
        seen += 1;
    }
    assert_eq!(seen, 4);
}
