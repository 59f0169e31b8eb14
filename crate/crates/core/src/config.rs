//! Versioned JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::dynamics::DynamicsConfig;
use crate::model::align::AlignGrouping;
use crate::model::arch::ArchDescription;
use crate::model::flops::{full_breakdown, prunable_budget};
use crate::model::Architecture;
use crate::sac::SacConfig;
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

pub const PRESETS: [&str; 4] = ["smoke", "cifar-resnet8-desk", "cifar-resnet56", "cifar-mobilenetv2-lite"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchSource {
    Preset(String),
    File(PathBuf),
    Inline(ArchDescription),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    Synthetic {
        train: SyntheticSpec,
        test_size: usize,
    },
    Cifar10 {
        dir: PathBuf,
        /// Use a stratified subset of this many training images.
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
    },
}

/// Epoch layout, all 1-based and inclusive.
///
/// Epochs `1..=warmup` train weights only. Episodes run in
/// `warmup+1..=agent_end`; the agent is updated in `agent_start+1..=agent_end`
/// (epochs up to `fill_end` only fill the replay buffer). Later epochs train
/// weights against the best mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub warmup: usize,
    pub fill_end: usize,
    pub agent_start: usize,
    pub agent_end: usize,
    pub episodes_per_epoch: usize,
    /// Decoder and agent gradient steps per epoch.
    #[serde(default = "one")]
    pub agent_steps: usize,
}

fn one() -> usize {
    1
}

impl Schedule {
    pub fn desk() -> Self {
        Schedule {
            epochs: 60,
            warmup: 3,
            fill_end: 6,
            agent_start: 6,
            agent_end: 30,
            episodes_per_epoch: 10,
            agent_steps: 1,
        }
    }

    pub fn full() -> Self {
        Schedule {
            epochs: 200,
            warmup: 10,
            fill_end: 20,
            agent_start: 20,
            agent_end: 90,
            episodes_per_epoch: 10,
            agent_steps: 1,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.warmup < self.fill_end
            && self.fill_end <= self.agent_start
            && self.agent_start < self.agent_end
            && self.agent_end <= self.epochs)
        {
            p.push(format!(
                "schedule needs warmup < fill_end <= agent_start < agent_end <= epochs, got {} / {} / {} / {} / {}",
                self.warmup, self.fill_end, self.agent_start, self.agent_end, self.epochs
            ));
        }
        if self.episodes_per_epoch == 0 {
            p.push("episodes_per_epoch must be >= 1".into());
        }
        if self.agent_steps == 0 {
            p.push("agent_steps must be >= 1".into());
        }
        p
    }

    pub fn runs_episodes(&self, t: usize) -> bool {
        t > self.warmup && t <= self.agent_end
    }

    pub fn trains_agent(&self, t: usize) -> bool {
        t > self.agent_start && t <= self.agent_end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: bool,
    /// Fractions of the run at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub finetune_epochs: usize,
    /// Restart the learning-rate schedule for fine-tuning instead of
    /// continuing from the decayed value.
    pub finetune_restart_lr: bool,
    /// Train a separate unpruned model for the same number of epochs as the
    /// baseline accuracy.
    pub train_baseline: bool,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            augment: true,
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            finetune_epochs: 20,
            finetune_restart_lr: true,
            train_baseline: true,
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    /// Learning rate for 1-based epoch `t` of a `total`-epoch schedule.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        let progress = (t - 1) as f64 / total.max(1) as f64;
        let passed = self.lr_milestones.iter().filter(|&&m| progress >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of whole-model FLOPs to remove.
    pub rate: f64,
    pub beta: f64,
    #[serde(default)]
    pub grouping: AlignGrouping,
    pub reward_subset: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            rate: 0.5,
            beta: 1e-4,
            grouping: AlignGrouping::PerLayer,
            reward_subset: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub sac: SacConfig,
    pub dynamics: DynamicsConfig,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Feed `z ≡ 0` everywhere (the "without embeddings" arm).
    pub zero_z: bool,
    /// Let critic and policy losses also update the environment model.
    pub joint_z_grad: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            sac: SacConfig::default(),
            dynamics: DynamicsConfig::default(),
            replay_capacity: 100_000,
            batch_size: 128,
            zero_z: false,
            joint_z_grad: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub arch: ArchSource,
    pub dataset: DatasetConfig,
    pub schedule: Schedule,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub agent: AgentConfig,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "smoke" => Ok(RunConfig {
                version: CONFIG_VERSION,
                name: "smoke".into(),
                seed: 0,
                arch: ArchSource::Preset("resnet8-tiny".into()),
                dataset: DatasetConfig::Synthetic {
                    train: SyntheticSpec {
                        size: 256,
                        resolution: 16,
                        ..SyntheticSpec::default()
                    },
                    test_size: 128,
                },
                schedule: Schedule {
                    epochs: 8,
                    warmup: 1,
                    fill_end: 2,
                    agent_start: 2,
                    agent_end: 6,
                    episodes_per_epoch: 4,
                    agent_steps: 2,
                },
                train: TrainConfig {
                    lr: 0.05,
                    batch_size: 64,
                    finetune_epochs: 2,
                    ..TrainConfig::default()
                },
                prune: PruneConfig {
                    reward_subset: 128,
                    ..PruneConfig::default()
                },
                agent: AgentConfig {
                    sac: SacConfig {
                        hidden: vec![64, 64],
                        ..SacConfig::default()
                    },
                    dynamics: DynamicsConfig {
                        emb_dim: 32,
                        hidden: 32,
                        decoder_hidden: vec![64, 64],
                        ..DynamicsConfig::default()
                    },
                    batch_size: 32,
                    ..AgentConfig::default()
                },
                checkpoint_every: 4,
                out_dir: PathBuf::from("runs/smoke"),
            }),
            "cifar-resnet8-desk" => Ok(RunConfig {
                version: CONFIG_VERSION,
                name: "cifar-resnet8-desk".into(),
                seed: 0,
                arch: ArchSource::Preset("resnet8".into()),
                dataset: DatasetConfig::Cifar10 {
                    dir: PathBuf::from("data/cifar-10-batches-bin"),
                    train_subset: Some(10_000),
                    test_subset: None,
                },
                schedule: Schedule::desk(),
                train: TrainConfig::default(),
                prune: PruneConfig::default(),
                agent: AgentConfig::default(),
                checkpoint_every: 10,
                out_dir: PathBuf::from("runs/cifar-resnet8-desk"),
            }),
            "cifar-resnet56" => Ok(RunConfig {
                version: CONFIG_VERSION,
                name: "cifar-resnet56".into(),
                seed: 0,
                arch: ArchSource::Preset("resnet56".into()),
                dataset: DatasetConfig::Cifar10 {
                    dir: PathBuf::from("data/cifar-10-batches-bin"),
                    train_subset: None,
                    test_subset: None,
                },
                schedule: Schedule::full(),
                train: TrainConfig {
                    finetune_epochs: 200,
                    ..TrainConfig::default()
                },
                prune: PruneConfig::default(),
                agent: AgentConfig::default(),
                checkpoint_every: 10,
                out_dir: PathBuf::from("runs/cifar-resnet56"),
            }),
            "cifar-mobilenetv2-lite" => Ok(RunConfig {
                version: CONFIG_VERSION,
                name: "cifar-mobilenetv2-lite".into(),
                seed: 0,
                arch: ArchSource::Preset("mobilenetv2-lite".into()),
                dataset: DatasetConfig::Cifar10 {
                    dir: PathBuf::from("data/cifar-10-batches-bin"),
                    train_subset: Some(10_000),
                    test_subset: None,
                },
                schedule: Schedule::desk(),
                train: TrainConfig::default(),
                prune: PruneConfig::default(),
                agent: AgentConfig::default(),
                checkpoint_every: 10,
                out_dir: PathBuf::from("runs/cifar-mobilenetv2-lite"),
            }),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not JSON: {e}")))?;
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CONFIG_VERSION as u64 => {}
            Some(v) => return Err(Error::Config(format!("config version {v}, expected {CONFIG_VERSION}"))),
            None => return Err(Error::Config("config has no numeric 'version' field".into())),
        }
        serde_json::from_value(raw).map_err(|e| Error::Config(format!("config schema: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn arch_description(&self) -> Result<ArchDescription> {
        match &self.arch {
            ArchSource::Preset(name) => ArchDescription::preset(name).ok_or_else(|| {
                Error::Config(format!(
                    "unknown architecture preset '{name}' (known: {})",
                    ArchDescription::PRESETS.join(", ")
                ))
            }),
            ArchSource::File(path) => ArchDescription::load(path),
            ArchSource::Inline(d) => Ok(d.clone()),
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.arch_description()?.resolve()
    }

    /// Every problem with the configuration, or `Ok` with the resolved
    /// architecture and the prunable-FLOPs budget.
    pub fn validate(&self) -> Result<(Architecture, u64)> {
        let mut p = Vec::new();
        if self.version != CONFIG_VERSION {
            p.push(format!("version {} (expected {CONFIG_VERSION})", self.version));
        }
        p.extend(self.schedule.problems());
        let t = &self.train;
        if t.lr <= 0.0 || !t.lr.is_finite() {
            p.push(format!("train.lr {} must be positive", t.lr));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            p.push(format!("train.momentum {} outside [0, 1)", t.momentum));
        }
        if t.weight_decay < 0.0 {
            p.push("train.weight_decay must be >= 0".into());
        }
        if t.batch_size == 0 || t.eval_batch == 0 {
            p.push("batch sizes must be >= 1".into());
        }
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            p.push(format!("train.lr_decay {} outside (0, 1]", t.lr_decay));
        }
        if t.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            p.push("train.lr_milestones must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.prune.rate) {
            p.push(format!("prune.rate {} outside [0, 1)", self.prune.rate));
        }
        if self.prune.beta < 0.0 || !self.prune.beta.is_finite() {
            p.push(format!("prune.beta {} must be >= 0", self.prune.beta));
        }
        if self.prune.reward_subset == 0 {
            p.push("prune.reward_subset must be >= 1".into());
        }
        if let Err(e) = self.agent.sac.validate() {
            p.push(e.to_string());
        }
        let d = &self.agent.dynamics;
        if d.emb_dim == 0 || d.hidden == 0 || d.lr <= 0.0 || d.emb_std < 0.0 {
            p.push("agent.dynamics needs emb_dim, hidden >= 1, lr > 0, emb_std >= 0".into());
        }
        if self.agent.batch_size == 0 || self.agent.replay_capacity == 0 {
            p.push("agent.batch_size and agent.replay_capacity must be >= 1".into());
        }

        let arch = match self.architecture() {
            Ok(a) => Some(a),
            Err(e) => {
                p.push(e.to_string());
                None
            }
        };
        let mut budget = 0;
        if let Some(arch) = &arch {
            match &self.dataset {
                DatasetConfig::Synthetic { train, test_size } => {
                    if train.resolution != arch.input_size {
                        p.push(format!(
                            "synthetic resolution {} != architecture input size {}",
                            train.resolution, arch.input_size
                        ));
                    }
                    if train.channels != arch.in_channels {
                        p.push(format!(
                            "synthetic channels {} != architecture input channels {}",
                            train.channels, arch.in_channels
                        ));
                    }
                    if train.num_classes != arch.num_classes {
                        p.push(format!(
                            "synthetic classes {} != architecture classes {}",
                            train.num_classes, arch.num_classes
                        ));
                    }
                    if *test_size == 0 {
                        p.push("synthetic test_size must be >= 1".into());
                    }
                    if self.prune.reward_subset > train.size {
                        p.push(format!(
                            "reward subset {} larger than the {} training images",
                            self.prune.reward_subset, train.size
                        ));
                    }
                }
                DatasetConfig::Cifar10 { train_subset, .. } => {
                    if arch.input_size != 32 || arch.in_channels != 3 || arch.num_classes != 10 {
                        p.push("CIFAR-10 needs a 3x32x32 input, 10-class architecture".into());
                    }
                    let n = train_subset.unwrap_or(50_000);
                    if self.prune.reward_subset > n {
                        p.push(format!("reward subset {} larger than the {n} training images", self.prune.reward_subset));
                    }
                }
            }
            let full = full_breakdown(arch);
            match prunable_budget(&full, self.prune.rate) {
                Ok(b) => {
                    let floor: u64 = arch.blocks.iter().map(crate::model::flops::per_channel_flops).sum();
                    if b < floor {
                        p.push(format!(
                            "pruning rate {} leaves {b} prunable MACs, below the {floor} needed to keep one channel per block",
                            self.prune.rate
                        ));
                    }
                    budget = b;
                }
                Err(e) => p.push(e.to_string()),
            }
        }
        if p.is_empty() {
            Ok((arch.expect("resolved"), budget))
        } else {
            Err(Error::Config(format!("{} problem(s):\n  - {}", p.len(), p.join("\n  - "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            let (arch, budget) = c.validate().unwrap();
            assert!(budget > 0 && !arch.blocks.is_empty());
            assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        }
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut c = RunConfig::preset("smoke").unwrap();
        c.schedule.episodes_per_epoch = 0;
        c.prune.rate = 1.5;
        c.train.lr = -1.0;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("episodes_per_epoch"), "{msg}");
        assert!(msg.contains("prune.rate"), "{msg}");
        assert!(msg.contains("train.lr"), "{msg}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::preset("smoke").unwrap().to_json()).unwrap();
        v["version"] = 2.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn lr_steps_down_at_milestones() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(1, 60), 0.1);
        assert_eq!(t.lr_at(30, 60), 0.1);
        assert!((t.lr_at(31, 60) - 0.01).abs() < 1e-15);
        assert!((t.lr_at(46, 60) - 0.001).abs() < 1e-15);
    }
}
