//! The per-epoch joint loop: environment representation, pruning episodes,
//! decoder and agent updates, best-mask tracking and aligned weight training.

mod cnn;
mod run;
mod synthetic;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AgentConfig, Schedule};
use crate::dynamics::EnvModel;
use crate::env::{run_episode, EnvSpec, Episode, ReplayBuffer};
use crate::metrics::{MetricsRow, TrajectoryRow};
use crate::model::ArchMask;
use crate::sac::SacAgent;
use crate::{Error, Result};

pub use cnn::{build_cnn_target, CnnTarget, FinalReport};
pub use run::{
    run_ablation, run_training, AblationGrid, AblationSeries, RunOutcome, ABLATION_FILE, REPORT_FILE,
};
pub use synthetic::{QuadraticTarget, RewardDrift};

/// What the loop needs from the thing being pruned.
pub trait PruningTarget {
    fn env_spec(&self) -> &EnvSpec;
    /// Channel order (least important first) per block for the current weights.
    fn rankings(&self) -> Vec<Vec<usize>>;
    /// Reward of a mask under the current weights.
    fn reward(&self, mask: &ArchMask) -> Result<f64>;
    /// One epoch of weight training aligned to `mask`.
    fn train_epoch(&mut self, t: usize, mask: &ArchMask) -> Result<WeightEpoch>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightEpoch {
    pub lr: f64,
    pub l_w: f64,
    pub l_class: f64,
    pub l_align: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub reward: f64,
    pub mask: ArchMask,
    pub epoch: usize,
    pub kept: Vec<usize>,
    pub realized_flops: u64,
}

pub struct IterationReport {
    pub metrics: MetricsRow,
    pub episodes: Vec<TrajectoryRow>,
}

pub struct Orchestrator<T: PruningTarget> {
    pub target: T,
    pub env_model: EnvModel<f32>,
    pub agent: SacAgent<f32>,
    pub replay: ReplayBuffer,
    pub best: Option<BestRecord>,
    pub schedule: Schedule,
    pub agent_cfg: AgentConfig,
    rng: ChaCha8Rng,
    next_epoch: usize,
}

impl<T: PruningTarget> Orchestrator<T> {
    pub fn new(target: T, schedule: Schedule, agent_cfg: AgentConfig, seed: u64) -> Result<Self> {
        let problems = schedule.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env_model = EnvModel::new(schedule.epochs, agent_cfg.dynamics.clone(), agent_cfg.zero_z, &mut rng)?;
        let agent = SacAgent::new(env_model.z_dim(), agent_cfg.sac.clone(), &mut rng)?;
        Ok(Orchestrator {
            target,
            env_model,
            agent,
            replay: ReplayBuffer::new(agent_cfg.replay_capacity),
            best: None,
            schedule,
            agent_cfg,
            rng,
            next_epoch: 1,
        })
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn is_done(&self) -> bool {
        self.next_epoch > self.schedule.epochs
    }

    /// The mask weight training aligns to: the best so far, or all ones.
    pub fn alignment_mask(&self) -> ArchMask {
        match &self.best {
            Some(b) => b.mask.clone(),
            None => ArchMask {
                blocks: self
                    .target
                    .env_spec()
                    .blocks
                    .iter()
                    .map(|b| vec![true; b.inner])
                    .collect(),
            },
        }
    }

    /// One episode at epoch `t` under the current policy, not stored.
    pub fn evaluate_policy(&mut self, t: usize, deterministic: bool) -> Result<Episode> {
        let z = self.env_model.env_repr(t)?.z;
        let rankings = self.target.rankings();
        let (agent, target, rng) = (&self.agent, &self.target, &mut self.rng);
        run_episode(
            target.env_spec(),
            &rankings,
            t,
            &mut |s| Ok(agent.act(&s.norm, &z, deterministic, rng)?.a),
            &mut |m| target.reward(m),
        )
    }

    /// Run the next epoch.
    pub fn run_iteration(&mut self) -> Result<IterationReport> {
        let t = self.next_epoch;
        if t > self.schedule.epochs {
            return Err(Error::InvalidArgument(format!("epoch {t} past the end of a {}-epoch run", self.schedule.epochs)));
        }
        let started = Instant::now();
        let sched = self.schedule.clone();
        let batch_size = self.agent_cfg.batch_size;
        let joint = self.agent_cfg.joint_z_grad;

        // (1) environment representation for this epoch
        let z = self.env_model.env_repr(t)?.z;

        // (2-4) episodes on a frozen weight snapshot
        let mut episodes = Vec::new();
        let mut rows = Vec::new();
        if sched.runs_episodes(t) {
            let rankings = self.target.rankings();
            for e in 0..sched.episodes_per_epoch {
                let (agent, target, rng) = (&self.agent, &self.target, &mut self.rng);
                let ep = run_episode(
                    target.env_spec(),
                    &rankings,
                    t,
                    &mut |s| Ok(agent.act(&s.norm, &z, false, rng)?.a),
                    &mut |m| target.reward(m),
                )?;
                rows.push(TrajectoryRow {
                    epoch: t,
                    episode: e,
                    raw_actions: ep.steps.iter().map(|s| s.raw).collect(),
                    executed_actions: ep.steps.iter().map(|s| s.executed).collect(),
                    kept: ep.kept(),
                    reward: ep.reward,
                    realized_flops: ep.realized_flops,
                });
                self.replay.extend(ep.transitions.iter().cloned());
                episodes.push(ep);
            }
        }

        // (5) decoder / environment-model update
        let mut l_recons = None;
        if sched.runs_episodes(t) && !self.replay.is_empty() {
            let mut acc = 0.0;
            for _ in 0..sched.agent_steps {
                let batch = self.replay.sample(batch_size, &mut self.rng);
                acc += self.env_model.recon_update(&batch)?;
            }
            l_recons = Some(acc / sched.agent_steps as f64);
        }

        // (6-7) agent update
        let (mut critic_losses, mut policy_loss) = (None, None);
        if sched.trains_agent(t) && !self.replay.is_empty() {
            let (mut c, mut p) = ([0.0; 2], 0.0);
            for _ in 0..sched.agent_steps {
                let batch = self.replay.sample(batch_size, &mut self.rng);
                let l = self.agent.critic_update(&mut self.env_model, &batch, joint, &mut self.rng)?;
                c[0] += l.q1;
                c[1] += l.q2;
                p += self.agent.policy_update(&mut self.env_model, &batch, joint, &mut self.rng)?;
                self.agent.polyak_update()?;
            }
            let k = sched.agent_steps as f64;
            critic_losses = Some([c[0] / k, c[1] / k]);
            policy_loss = Some(p / k);
        }

        // (8) best record
        for ep in &episodes {
            if self.best.as_ref().is_none_or(|b| ep.reward > b.reward) {
                self.best = Some(BestRecord {
                    reward: ep.reward,
                    mask: ep.mask.clone(),
                    epoch: t,
                    kept: ep.kept(),
                    realized_flops: ep.realized_flops,
                });
            }
        }

        // (9) aligned weight training
        let mask = self.alignment_mask();
        let w = self.target.train_epoch(t, &mask)?;

        self.next_epoch += 1;
        let metrics = MetricsRow {
            epoch: t,
            lr: w.lr,
            train_loss: w.l_w,
            l_class: w.l_class,
            l_align: w.l_align,
            l_recons,
            critic_losses,
            policy_loss,
            episode_rewards: episodes.iter().map(|e| e.reward).collect(),
            best_reward: self.best.as_ref().map(|b| b.reward),
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            best_flops: self.best.as_ref().map(|b| b.realized_flops),
            replay_len: self.replay.len(),
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        Ok(IterationReport { metrics, episodes: rows })
    }
}
