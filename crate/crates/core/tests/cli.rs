use std::fs;
use std::path::Path;
use std::process::Command;

use cda::cli::dispatch;
use cda::config::RunConfig;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("cda").chain(args.iter().copied());
    let code = dispatch(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 10] = [
    "--set",
    "model.d_h=4",
    "--set",
    "model.d_k=3",
    "--set",
    "train.epochs=1",
    "--set",
    "train.batch_size=4",
    "--seed",
    "3",
];

#[test]
fn simulate_then_ingest_counts_records() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sim.csv");
    let (code, out, err) = run(&["simulate", "--episodes", "20", "--length", "40", "-o", p(&csv), "--seed", "1"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("20 episodes, 800 records"), "{out}");
    let (code, out, _) = run(&["ingest", p(&csv)]);
    assert_eq!(code, 0);
    assert!(out.contains("episodes 20\n") && out.contains("records 800\n"), "{out}");
    assert!(out.contains("policy fracturing:"));
}

#[test]
fn usage_errors_exit_with_two() {
    let (code, _, err) = run(&["simulate", "--no-such-flag"]);
    assert_eq!(code, 2);
    assert!(!err.is_empty());
    assert_eq!(run(&["bogus"]).0, 2);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn runtime_errors_exit_with_one() {
    let (code, _, err) = run(&["ingest", "/no/such/file.csv"]);
    assert_eq!(code, 1);
    assert!(err.contains("/no/such/file.csv"), "{err}");
    let (code, _, err) = run(&["--set", "train.lambda=oops", "--print-config"]);
    assert_eq!(code, 1, "{err}");
    assert_eq!(run(&[]).0, 1);
}

#[test]
fn built_in_checks_pass() {
    let (code, out, _) = run(&["check", "--seed", "7"]);
    assert_eq!(code, 0, "{out}");
    assert!(!out.contains("FAIL"));
}

#[test]
fn printed_config_reproduces_itself() {
    let (code, first, _) = run(&["--set", "train.lambda=0.25", "--seed", "11", "--print-config"]);
    assert_eq!(code, 0);
    let cfg = RunConfig::from_json(&first).unwrap();
    assert_eq!(cfg.train.lambda, 0.25);
    assert_eq!(cfg.train.seed, 11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, &first).unwrap();
    let (_, second, _) = run(&["--config", p(&path), "--print-config"]);
    assert_eq!(first, second);
}

#[test]
fn training_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sim.csv");
    assert_eq!(run(&["simulate", "--episodes", "8", "--length", "12", "-o", p(&csv)]).0, 0);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let mut args = SMALL.to_vec();
        args.extend(["train", "--source", p(&csv), "--out", p(&out_dir)]);
        let (code, _, err) = run(&args);
        assert_eq!(code, 0, "{err}");
        outputs.push((
            fs::read(out_dir.join("state.ckpt")).unwrap(),
            fs::read_to_string(out_dir.join("train_log.jsonl")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0].1.lines().count(), 2);
}

#[test]
fn rank_policies_reads_a_trained_run() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sim.csv");
    assert_eq!(run(&["simulate", "--episodes", "6", "--length", "20", "-o", p(&csv)]).0, 0);
    let run_dir = dir.path().join("run");
    let mut args = SMALL.to_vec();
    args.extend(["train", "--source", p(&csv), "--out", p(&run_dir)]);
    assert_eq!(run(&args).0, 0);
    let well = fs::read_to_string(&csv).unwrap().lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    let (code, out, err) = run(&[
        "rank-policies",
        "--run",
        p(&run_dir),
        "--data",
        p(&csv),
        "--episode",
        &well,
        "--start",
        "10",
        "--len",
        "5",
    ]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["trajectories"].as_array().unwrap().len(), 5);
    let (code, _, err) = run(&[
        "rank-policies", "--run", p(&run_dir), "--data", p(&csv), "--episode", &well, "--start", "10", "--len", "5", "--reference", "teleport",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("unknown treatment"));
}

#[test]
fn default_run_directories_separate_lambda_settings() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sim.csv");
    assert_eq!(run(&["simulate", "--episodes", "6", "--length", "10", "-o", p(&csv)]).0, 0);
    for extra in [&[][..], &["--set", "train.lambda=0"][..]] {
        let status = Command::new(env!("CARGO_BIN_EXE_cda"))
            .current_dir(dir.path())
            .args(SMALL)
            .args(extra)
            .args(["train", "--source", p(&csv)])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    }
    let mut runs: Vec<String> = fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    runs.sort();
    assert_eq!(runs, vec!["lambda0-seed3", "lambda1-seed3"]);
}
