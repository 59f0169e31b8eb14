//! End-to-end runs on the smoke preset and report emission.

use std::time::Instant;

use coprune::config::RunConfig;
use coprune::metrics::{read_jsonl, MetricsRow, TrajectoryRow, METRICS_FILE, TRAJECTORY_FILE};
use coprune::orchestrator::run_training;
use coprune::report::{report_run, SUMMARY_CSV};

#[test]
fn smoke_run_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::preset("smoke").unwrap();
    let start = Instant::now();
    let out = run_training(&cfg, dir.path()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    eprintln!("smoke run: {secs:.1}s {:?}", out.report);
    assert!(secs < 120.0);
    assert_eq!(out.metrics.len(), 8);
    let rows: Vec<MetricsRow> = read_jsonl(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows, out.metrics);
    let traj: Vec<TrajectoryRow> = read_jsonl(&dir.path().join(TRAJECTORY_FILE)).unwrap();
    assert!(!traj.is_empty());
    assert!(out.report.realized_prunable <= out.report.prunable_budget);

    let art = report_run(dir.path(), None).unwrap();
    let summary = std::fs::read_to_string(dir.path().join(SUMMARY_CSV)).unwrap();
    assert!(summary.starts_with("baseline_acc,pruned_acc,delta_acc,pruned_flops_pct\n"));
    assert!(art.summary.is_some());
    let recomputed: Vec<Option<f64>> = art.best_reward.iter().map(|b| b.1).collect();
    let logged: Vec<Option<f64>> = rows.iter().map(|m| m.best_reward).collect();
    assert_eq!(recomputed, logged);
}
