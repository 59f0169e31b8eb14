use serde::{Deserialize, Serialize};

use super::arch::Architecture;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Per-block keep vectors over inner channels (`true` = keep).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchMask {
    pub blocks: Vec<Vec<bool>>,
}

impl ArchMask {
    pub fn all_ones(arch: &Architecture) -> Self {
        ArchMask {
            blocks: arch.blocks.iter().map(|b| vec![true; b.inner]).collect(),
        }
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|v| v.iter().filter(|&&k| k).count())
            .collect()
    }

    pub fn is_all_ones(&self) -> bool {
        self.blocks.iter().all(|v| v.iter().all(|&k| k))
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        if self.blocks.len() != arch.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "mask has {} blocks, model has {}",
                self.blocks.len(),
                arch.blocks.len()
            )));
        }
        for (v, b) in self.blocks.iter().zip(&arch.blocks) {
            if v.len() != b.inner {
                return Err(Error::InvalidArgument(format!(
                    "block {}: mask length {} != {} inner channels",
                    b.index,
                    v.len(),
                    b.inner
                )));
            }
            if !v.iter().any(|&k| k) {
                return Err(Error::InvalidArgument(format!(
                    "block {}: mask removes every channel",
                    b.index
                )));
            }
        }
        Ok(())
    }
}

/// Output-channel indices of `weight` (`[C_out, ...]`) in ascending order of
/// filter L1 norm. Ties keep the lower index first.
pub fn rank_channels_l1<S: Scalar>(weight: &Tensor<S>) -> Vec<usize> {
    let c = weight.dim(0);
    let per = weight.numel() / c;
    let norms: Vec<f64> = weight
        .data()
        .chunks(per)
        .map(|f| f.iter().map(|v| v.abs().as_f64()).sum())
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]));
    order
}

/// Number of channels an action removes from a block of width `c`.
pub fn removed_count(a: f64, c: usize) -> usize {
    (a * c as f64).floor() as usize
}

/// Keep-vector removing the `floor(a·c)` least important channels.
pub fn mask_from_action(a: f64, ranking: &[usize]) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&a) {
        return Err(Error::InvalidArgument(format!("action {a} outside [0, 1)")));
    }
    Ok(mask_removing(removed_count(a, ranking.len()), ranking))
}

/// Keep-vector with the first `n` entries of `ranking` removed.
pub fn mask_removing(n: usize, ranking: &[usize]) -> Vec<bool> {
    let mut v = vec![true; ranking.len()];
    for &i in &ranking[..n.min(ranking.len())] {
        v[i] = false;
    }
    v
}
