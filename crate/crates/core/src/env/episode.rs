use serde::{Deserialize, Serialize};

use super::bounds::{bound_action, ActionBounds, BoundInputs};
use super::replay::Transition;
use super::state::{build_state, EnvSpec, PruneState};
use crate::model::mask::{mask_removing, removed_count};
use crate::model::ArchMask;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub raw: f64,
    /// Action after clipping and integer-budget rounding; this is what the
    /// transition stores.
    pub executed: f64,
    pub bounds: ActionBounds,
    pub kept: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub reward: f64,
    pub mask: ArchMask,
    pub steps: Vec<StepRecord>,
    pub realized_flops: u64,
}

impl Episode {
    pub fn kept(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.kept).collect()
    }
}

/// Prune blocks `1..=L` one at a time, then score the resulting mask.
///
/// `policy` maps a state to a raw action in `[0, 1)`; `rankings[l]` orders
/// block `l`'s channels from least to most important; `reward` scores the
/// final mask. Every transition carries the same reward and only the last
/// one is terminal. The realized prunable FLOPs never exceed the budget:
/// each block keeps at most as many channels as the remaining budget allows
/// after reserving one channel for each later block.
pub fn run_episode(
    spec: &EnvSpec,
    rankings: &[Vec<usize>],
    epoch: usize,
    policy: &mut dyn FnMut(&PruneState) -> Result<f64>,
    reward: &mut dyn FnMut(&ArchMask) -> Result<f64>,
) -> Result<Episode> {
    let n = spec.num_blocks();
    if rankings.len() != n {
        return Err(Error::InvalidArgument(format!("{} rankings for {n} blocks", rankings.len())));
    }
    let mut kept: Vec<usize> = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut steps = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    let mut prev = 0.0;
    for (l, ranking) in rankings.iter().enumerate() {
        let s = build_state(spec, l + 1, &kept, prev)?;
        let c = spec.blocks[l].inner;
        let unit = spec.unit_flops[l];
        let before = spec.realized(&kept);
        let reserve: u64 = spec.unit_flops[l + 1..].iter().sum();
        let inputs = BoundInputs {
            desire: spec.desire as f64,
            before: before as f64,
            flops_l: spec.full_flops(l) as f64,
            after: s.flops_after,
            reserve: reserve as f64,
            channels: c,
            block: l + 1,
        };
        let raw = policy(&s)?;
        if !(0.0..1.0).contains(&raw) {
            return Err(Error::InvalidArgument(format!("block {}: raw action {raw} outside [0, 1)", l + 1)));
        }
        let (clipped, bounds) = bound_action(raw, &inputs)?;

        // Integer budget: channels this block may keep.
        let room = spec.desire as i128 - before as i128 - reserve as i128;
        let max_keep = if room <= 0 { 0 } else { (room as u64 / unit) as usize };
        if max_keep == 0 {
            return Err(Error::InfeasibleBudget {
                block: l + 1,
                detail: format!("{room} MACs left, one channel needs {unit}"),
            });
        }
        let needed = c.saturating_sub(max_keep);
        let removed = removed_count(clipped, c).max(needed);
        let executed = if removed > removed_count(clipped, c) {
            clipped.max(needed as f64 / c as f64)
        } else {
            clipped
        };
        let k = c - removed;
        masks.push(mask_removing(removed, ranking));
        kept.push(k);
        steps.push(StepRecord {
            raw,
            executed,
            bounds,
            kept: k,
        });
        states.push(s);
        prev = executed;
    }
    let realized = spec.realized(&kept);
    if realized > spec.desire {
        return Err(Error::InfeasibleBudget {
            block: n,
            detail: format!("realized {realized} > budget {}", spec.desire),
        });
    }
    let mask = ArchMask { blocks: masks };
    let r = reward(&mask)?;
    let transitions = (0..n)
        .map(|l| Transition {
            s: states[l].clone(),
            a: steps[l].executed,
            r,
            s_next: states.get(l + 1).unwrap_or(&states[l]).clone(),
            done: l + 1 == n,
            epoch,
        })
        .collect();
    Ok(Episode {
        transitions,
        reward: r,
        mask,
        steps,
        realized_flops: realized,
    })
}
