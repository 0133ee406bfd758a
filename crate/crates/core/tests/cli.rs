use std::path::Path;
use std::process::{Command, Output};

fn fbrht(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbrht"))
        .args(args)
        .args(["--out", dir.to_str().unwrap(), "--set", "n_burnin_iters=50", "--set", "n_sampling_iters=200"])
        .output()
        .unwrap()
}

#[test]
fn missing_input_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = fbrht(dir.path(), &["fit", "--train", "/nonexistent/train.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = fbrht(dir.path(), &["simulate", "--set", "no_such_key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# desk run\nn_train = 30\nn_test = 20\n").unwrap();
    let out = fbrht(dir.path(), &["simulate", "--config", cfg.to_str().unwrap(), "--n-test", "25"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap().lines().count();
    assert_eq!(lines("train.csv"), 31);
    assert_eq!(lines("test.csv"), 26);
}

#[test]
fn samples_from_other_settings_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    assert!(fbrht(dir.path(), &["simulate", "--n-train", "40"]).status.success());
    let train = dir.path().join("train.csv");
    assert!(fbrht(dir.path(), &["fit", "--train", train.to_str().unwrap()]).status.success());
    let samples = dir.path().join("samples.bin");
    let out = fbrht(dir.path(), &["extract", "--samples", samples.to_str().unwrap(), "--set", "epsilon_adjust=0.3"]);
    assert!(!out.status.success());
    assert!(!dir.path().join("subsets.txt").exists());
    let ok = fbrht(dir.path(), &["extract", "--samples", samples.to_str().unwrap()]);
    assert!(ok.status.success());
    let jsonl = std::fs::read_to_string(dir.path().join("subsets.jsonl")).unwrap();
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["record"].is_string());
    }
}
