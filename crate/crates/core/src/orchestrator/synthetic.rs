//! Synthetic pruning targets with a closed-form reward.
//!
//! Each block has `c` channels and the realized action of block `l` is
//! `a_l = removed_l / c`. The reward is
//! `scale(t) · (1 − k · Σ_l (a_l − a*_l(t))²)`, so the optimum is known
//! exactly. With [`RewardDrift::Parity`] the optimal actions alternate
//! between two vectors on odd and even epochs.
//!
//! Blocks are identical, so the prunable budget is a fraction of kept
//! channels. The episode bounds hold realized FLOPs at the budget, so an
//! optimum is reachable only when its mean kept fraction equals the budget.

use serde::{Deserialize, Serialize};

use super::{PruningTarget, WeightEpoch};
use crate::env::EnvSpec;
use crate::model::arch::{ArchDescription, BlockKind, BlockRecord, StemRecord};
use crate::model::ArchMask;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RewardDrift {
    Stationary,
    /// Even epochs use this optimum instead.
    Parity(Vec<f64>),
    /// The optimum moves linearly from the base vector at epoch 1 to this
    /// one at the final epoch.
    Linear(Vec<f64>),
    /// Add `+h` on even epochs and `−h` on odd ones, independent of actions.
    Offset(f64),
}

pub struct QuadraticTarget {
    spec: EnvSpec,
    pub channels: usize,
    pub optimum: Vec<f64>,
    pub drift: RewardDrift,
    pub sharpness: f64,
    /// Reward scale grows linearly from 1 to `1 + growth` over the run.
    pub growth: f64,
    pub total_epochs: usize,
    epoch: usize,
}

impl QuadraticTarget {
    pub fn new(
        channels: usize,
        optimum: Vec<f64>,
        drift: RewardDrift,
        sharpness: f64,
        growth: f64,
        total_epochs: usize,
        keep_frac: f64,
    ) -> Result<Self> {
        if !(keep_frac > 0.0 && keep_frac <= 1.0) {
            return Err(Error::Config(format!("keep fraction {keep_frac} outside (0, 1]")));
        }
        if optimum.is_empty() || channels < 2 {
            return Err(Error::Config("quadratic target needs >= 1 block and >= 2 channels".into()));
        }
        if let RewardDrift::Parity(alt) | RewardDrift::Linear(alt) = &drift {
            if alt.len() != optimum.len() {
                return Err(Error::Config("drift optimum length differs from the block count".into()));
            }
        }
        let arch = ArchDescription {
            name: "quadratic".into(),
            in_channels: 1,
            input_size: 4,
            num_classes: 2,
            stem: StemRecord {
                channels: 2,
                kernel: 1,
                stride: 1,
                pool_stride: 1,
            },
            blocks: optimum
                .iter()
                .map(|_| BlockRecord {
                    kind: BlockKind::PlainConv,
                    out_channels: 2,
                    inner_channels: channels,
                    stride: 1,
                    kernel: 1,
                })
                .collect(),
        }
        .resolve()?;
        let full: u64 = arch.blocks.iter().map(crate::model::flops::per_channel_flops).sum::<u64>() * channels as u64;
        let spec = EnvSpec::new(&arch, (keep_frac * full as f64).round() as u64)?;
        Ok(QuadraticTarget {
            spec,
            channels,
            optimum,
            drift,
            sharpness,
            growth,
            total_epochs,
            epoch: 1,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn optimum_at(&self, t: usize) -> Vec<f64> {
        match &self.drift {
            RewardDrift::Parity(alt) if t.is_multiple_of(2) => alt.clone(),
            RewardDrift::Linear(end) => {
                let f = t.saturating_sub(1) as f64 / self.total_epochs.saturating_sub(1).max(1) as f64;
                self.optimum.iter().zip(end).map(|(a, b)| a + (b - a) * f.min(1.0)).collect()
            }
            _ => self.optimum.clone(),
        }
    }

    pub fn scale_at(&self, t: usize) -> f64 {
        1.0 + self.growth * (t.saturating_sub(1)) as f64 / self.total_epochs.max(1) as f64
    }

    pub fn reward_at(&self, t: usize, actions: &[f64]) -> f64 {
        let err: f64 = actions
            .iter()
            .zip(self.optimum_at(t))
            .map(|(a, o)| (a - o) * (a - o))
            .sum();
        let offset = match self.drift {
            RewardDrift::Offset(h) if t.is_multiple_of(2) => h,
            RewardDrift::Offset(h) => -h,
            _ => 0.0,
        };
        self.scale_at(t) * (1.0 - self.sharpness * err) + offset
    }

    /// Best achievable reward at epoch `t` on the `1/c` action grid.
    pub fn optimal_reward(&self, t: usize) -> f64 {
        let c = self.channels as f64;
        let grid: Vec<f64> = self
            .optimum_at(t)
            .iter()
            .map(|&o| (o * c).round().clamp(0.0, c - 1.0) / c)
            .collect();
        self.reward_at(t, &grid)
    }
}

impl PruningTarget for QuadraticTarget {
    fn env_spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn rankings(&self) -> Vec<Vec<usize>> {
        vec![(0..self.channels).collect(); self.optimum.len()]
    }

    fn reward(&self, mask: &ArchMask) -> Result<f64> {
        let actions: Vec<f64> = mask
            .blocks
            .iter()
            .map(|k| k.iter().filter(|&&x| !x).count() as f64 / self.channels as f64)
            .collect();
        Ok(self.reward_at(self.epoch, &actions))
    }

    fn train_epoch(&mut self, t: usize, _mask: &ArchMask) -> Result<WeightEpoch> {
        self.epoch = t + 1;
        Ok(WeightEpoch::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_is_maximal_at_the_optimum() {
        let t = QuadraticTarget::new(10, vec![0.3, 0.5], RewardDrift::Parity(vec![0.7, 0.1]), 2.0, 1.0, 10, 0.6).unwrap();
        assert_eq!(t.optimal_reward(1), 1.0);
        assert_eq!(t.reward_at(1, &[0.3, 0.5]), 1.0);
        assert!(t.reward_at(1, &[0.4, 0.5]) < 1.0);
        assert_eq!(t.optimum_at(2), vec![0.7, 0.1]);
        assert!((t.optimal_reward(2) - 1.1).abs() < 1e-12);
        let mask = ArchMask {
            blocks: vec![
                (0..10).map(|i| i >= 3).collect(),
                (0..10).map(|i| i >= 5).collect(),
            ],
        };
        assert_eq!(t.reward(&mask).unwrap(), 1.0);
    }
}
