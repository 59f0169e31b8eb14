//! Run directories: end-to-end training and the ablation grid.

use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::{build_cnn_target, BestRecord, FinalReport, Orchestrator};
use crate::config::RunConfig;
use crate::metrics::{JsonlWriter, MetricsRow, TrajectoryRow, METRICS_FILE, TRAJECTORY_FILE};
use crate::tensor::checkpoint::Checkpoint;
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const BEST_FILE: &str = "best.json";
pub const AUDIT_FILE: &str = "ingest_audit.json";
pub const ABLATION_FILE: &str = "ablation.jsonl";

pub struct RunOutcome {
    pub metrics: Vec<MetricsRow>,
    pub best: Option<BestRecord>,
    pub report: FinalReport,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn checkpoint<T: super::PruningTarget>(
    orch: &Orchestrator<T>,
    model: &crate::model::PrunableModel<f32>,
    dir: &Path,
    epoch: usize,
) -> Result<()> {
    let mut ck = Checkpoint::new();
    model.push_to_checkpoint(&mut ck, "model");
    orch.env_model.push_to_checkpoint(&mut ck, "env");
    orch.agent.push_to_checkpoint(&mut ck, "sac");
    ck.meta = serde_json::json!({
        "epoch": epoch,
        "best": orch.best,
        "replay_len": orch.replay.len(),
    });
    ck.write(dir, &format!("epoch{epoch:04}"))?;
    Ok(())
}

/// Train, prune and fine-tune per `cfg`, writing everything under `out`.
pub fn run_training(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json()).map_err(|e| Error::io(out, e))?;
    let (target, audit) = build_cnn_target(cfg)?;
    if let Some(a) = &audit {
        write_json(&out.join(AUDIT_FILE), a)?;
    }
    let mut orch = Orchestrator::new(target, cfg.schedule.clone(), cfg.agent.clone(), cfg.seed)?;
    let mut metrics_out = JsonlWriter::<MetricsRow>::create(&out.join(METRICS_FILE))?;
    let mut traj_out = JsonlWriter::<TrajectoryRow>::create(&out.join(TRAJECTORY_FILE))?;
    let ck_dir = out.join("checkpoints");
    let mut metrics = Vec::with_capacity(cfg.schedule.epochs);
    while !orch.is_done() {
        let rep = orch.run_iteration()?;
        for row in &rep.episodes {
            traj_out.write(row)?;
        }
        metrics_out.write(&rep.metrics)?;
        let t = rep.metrics.epoch;
        info!(
            "epoch {t}: L_w {:.4} L_align {:.4} best {:?}",
            rep.metrics.train_loss, rep.metrics.l_align, rep.metrics.best_reward
        );
        metrics.push(rep.metrics);
        if cfg.checkpoint_every > 0 && (t % cfg.checkpoint_every == 0 || t == cfg.schedule.epochs) {
            fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
            checkpoint(&orch, &orch.target.model, &ck_dir, t)?;
        }
    }
    let (report, pruned) = orch.target.finalize(orch.best.as_ref())?;
    write_json(&out.join(BEST_FILE), &orch.best)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    if cfg.checkpoint_every > 0 {
        let mut ck = Checkpoint::new();
        pruned.push_to_checkpoint(&mut ck, "model");
        ck.meta = serde_json::to_value(&pruned.arch)?;
        ck.write(&ck_dir, "pruned")?;
    }
    Ok(RunOutcome {
        metrics,
        best: orch.best,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    /// Pruning rates for the with/without-embedding comparison.
    pub rates: Vec<f64>,
    /// Episode counts for the P sweep.
    pub episode_counts: Vec<usize>,
    /// Pruning rate used by the P sweep.
    pub sweep_rate: f64,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            rates: vec![0.35, 0.5, 0.65],
            episode_counts: vec![5, 10, 15],
            sweep_rate: 0.65,
            seeds: vec![0],
        }
    }
}

/// One best-reward curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSeries {
    pub group: String,
    pub label: String,
    pub rate: f64,
    pub zero_z: bool,
    pub episodes_per_epoch: usize,
    pub seed: u64,
    /// Best reward after each epoch (None before the first episode).
    pub best_reward: Vec<Option<f64>>,
}

fn curve(cfg: &RunConfig) -> Result<Vec<Option<f64>>> {
    let (target, _) = build_cnn_target(cfg)?;
    let mut orch = Orchestrator::new(target, cfg.schedule.clone(), cfg.agent.clone(), cfg.seed)?;
    let mut out = Vec::new();
    // Episodes stop after the agent window, so the curve is final there.
    while orch.next_epoch() <= cfg.schedule.agent_end {
        out.push(orch.run_iteration()?.metrics.best_reward);
    }
    Ok(out)
}

/// Run the embedding on/off comparison per pruning rate and the P sweep,
/// appending every curve to `out/ablation.jsonl`.
pub fn run_ablation(base: &RunConfig, grid: &AblationGrid, out: &Path) -> Result<Vec<AblationSeries>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join(CONFIG_FILE), base.to_json()).map_err(|e| Error::io(out, e))?;
    let mut w = JsonlWriter::<AblationSeries>::create(&out.join(ABLATION_FILE))?;
    let mut all = Vec::new();
    let mut jobs = Vec::new();
    for &seed in &grid.seeds {
        for &rate in &grid.rates {
            for zero_z in [false, true] {
                let arm = if zero_z { "w/o Emb" } else { "w/ Emb" };
                jobs.push((
                    "embedding".to_string(),
                    format!("{:.0}% {arm}", rate * 100.0),
                    rate,
                    zero_z,
                    base.schedule.episodes_per_epoch,
                    seed,
                ));
            }
        }
        for &p in &grid.episode_counts {
            jobs.push((
                "episodes".to_string(),
                format!("P={p} ({:.0}%)", grid.sweep_rate * 100.0),
                grid.sweep_rate,
                base.agent.zero_z,
                p,
                seed,
            ));
        }
    }
    for (group, label, rate, zero_z, p, seed) in jobs {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.prune.rate = rate;
        cfg.agent.zero_z = zero_z;
        cfg.schedule.episodes_per_epoch = p;
        info!("ablation {group}: {label} seed {seed}");
        let s = AblationSeries {
            group,
            label,
            rate,
            zero_z,
            episodes_per_epoch: p,
            seed,
            best_reward: curve(&cfg)?,
        };
        w.write(&s)?;
        all.push(s);
    }
    Ok(all)
}
