//! Drives the `coprune` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn coprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coprune"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = coprune(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

#[test]
fn dry_run_prints_schedule_and_budget_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let s = ok(&["train", "--preset", "smoke", "--dry-run", "--out", out.to_str().unwrap()]);
    assert!(s.contains("T=8"), "{s}");
    assert!(s.contains("keep at most 332640 prunable MACs"), "{s}");
    assert!(!out.exists());
}

#[test]
fn invalid_config_lists_every_problem_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(write_smoke_config(dir.path())).unwrap()).unwrap();
    v["train"]["lr"] = serde_json::json!(-1.0);
    v["prune"]["rate"] = serde_json::json!(1.5);
    v["schedule"]["agent_end"] = serde_json::json!(99);
    std::fs::write(&cfg_path, v.to_string()).unwrap();
    let o = coprune(&["train", "--config", cfg_path.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train.lr") && err.contains("prune.rate") && err.contains("agent_end"), "{err}");
    assert!(!dir.path().join("r").exists());
}

fn write_smoke_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("smoke.json");
    std::fs::write(&p, coprune::config::RunConfig::preset("smoke").unwrap().to_json()).unwrap();
    p
}

#[test]
fn wrong_config_version_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_smoke_config(dir.path());
    let text = std::fs::read_to_string(&p).unwrap().replacen("\"version\": 1", "\"version\": 7", 1);
    std::fs::write(&p, text).unwrap();
    let o = coprune(&["train", "--config", p.to_str().unwrap(), "--dry-run"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("version 7"));
}

#[test]
fn flops_lists_blocks_and_realized_budget() {
    let s = ok(&["flops", "--arch", "resnet56"]);
    assert!(s.contains("27 prunable blocks"), "{s}");
    let s = ok(&["flops", "--arch", "resnet8", "--uniform", "0.5"]);
    assert!(s.contains("realized prunable 5898240 / 11796480 (50.0000%)"), "{s}");
    let s = ok(&["flops", "--arch", "resnet8", "--uniform", "0", "--rate", "0"]);
    assert!(s.contains("(100.0000%)"), "{s}");
    let s = ok(&["flops", "--preset", "smoke", "--actions", "0,0,0"]);
    assert!(s.contains("a_min"), "{s}");
    assert!(s.contains("budget 332640"), "{s}");
}

#[test]
fn flops_rejects_a_malformed_architecture_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("arch.json");
    std::fs::write(&p, "{\"blocks\": 3}").unwrap();
    let o = coprune(&["flops", "--arch", p.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn smoke_train_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    let s = ok(&["train", "--preset", "smoke", "--seed", "3", "--out", r]);
    assert!(s.contains("pruned FLOPs"), "{s}");
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 8);
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 3);

    let s = ok(&["report", r]);
    assert!(s.contains("baseline_acc,pruned_acc,delta_acc,pruned_flops_pct"), "{s}");
    for f in ["summary.csv", "best_reward.csv", "losses.csv", "best_reward.svg", "losses.svg"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let best = std::fs::read_to_string(run.join("best_reward.csv")).unwrap();
    let vals: Vec<f64> = best.lines().skip(1).filter_map(|l| l.split(',').nth(1)?.parse().ok()).collect();
    assert!(vals.windows(2).all(|w| w[1] >= w[0]), "{vals:?}");
}

#[test]
fn report_fails_on_missing_or_corrupt_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().to_str().unwrap();
    assert!(!coprune(&["report", r]).status.success());
    std::fs::write(dir.path().join("metrics.jsonl"), "{not json\n").unwrap();
    let o = coprune(&["report", r]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("metrics.jsonl:1"));
}

#[test]
fn ablate_then_report_overlays_curves() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().to_str().unwrap();
    let s = ok(&["ablate", "--preset", "smoke", "--out", r, "--rates", "0.5", "--episodes", "2,4", "--sweep-rate", "0.5"]);
    assert!(s.starts_with("4 curves"), "{s}");
    ok(&["report", r]);
    assert!(dir.path().join("ablation_embedding.svg").exists());
    assert!(dir.path().join("ablation_episodes.svg").exists());
    let csv = std::fs::read_to_string(dir.path().join("ablation_curves.csv")).unwrap();
    assert!(csv.contains("50% w/o Emb") && csv.contains("P=4 (50%)"), "{csv}");
}
