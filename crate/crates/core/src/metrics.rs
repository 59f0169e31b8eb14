//! Per-epoch metrics and per-episode trajectory streams (JSON lines).

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    /// Mean `L_w` over the epoch's weight-training batches.
    pub train_loss: f64,
    pub l_class: f64,
    pub l_align: f64,
    pub l_recons: Option<f64>,
    pub critic_losses: Option<[f64; 2]>,
    pub policy_loss: Option<f64>,
    pub episode_rewards: Vec<f64>,
    pub best_reward: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Realized prunable FLOPs of the best mask.
    pub best_flops: Option<u64>,
    pub replay_len: usize,
    pub wall_clock_s: f64,
}

impl MetricsRow {
    /// The row with timing zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> MetricsRow {
        MetricsRow {
            wall_clock_s: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub episode: usize,
    pub raw_actions: Vec<f64>,
    pub executed_actions: Vec<f64>,
    pub kept: Vec<usize>,
    pub reward: f64,
    pub realized_flops: u64,
}

/// Append-only JSON-lines file; every row is flushed as it is written.
pub struct JsonlWriter<T> {
    out: BufWriter<File>,
    path: PathBuf,
    _row: PhantomData<T>,
}

impl<T: Serialize> JsonlWriter<T> {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::wrap(f, path))
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self::wrap(f, path))
    }

    fn wrap(f: File, path: &Path) -> Self {
        JsonlWriter {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
            _row: PhantomData,
        }
    }

    pub fn write(&mut self, row: &T) -> Result<()> {
        let line = serde_json::to_string(row)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize) -> MetricsRow {
        MetricsRow {
            epoch,
            lr: 0.1,
            train_loss: 1.5,
            l_class: 1.4,
            l_align: 0.1,
            l_recons: None,
            critic_losses: Some([0.5, 0.25]),
            policy_loss: None,
            episode_rewards: vec![0.1, 0.2],
            best_reward: Some(0.2),
            best_epoch: Some(epoch),
            best_flops: Some(1000),
            replay_len: 4,
            wall_clock_s: 0.3,
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = JsonlWriter::create(&p).unwrap();
        w.write(&row(1)).unwrap();
        w.write(&row(2)).unwrap();
        drop(w);
        let rows: Vec<MetricsRow> = read_jsonl(&p).unwrap();
        assert_eq!(rows, vec![row(1), row(2)]);
        std::fs::write(&p, "{\"epoch\": 1}\n").unwrap();
        let err = read_jsonl::<MetricsRow>(&p).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }
}
