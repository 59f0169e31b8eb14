//! Feasible action range for one pruning step.
//!
//! ```text
//! a_min = 1 − (D − F_before − R) / F_l
//! a_max = 1 − (D − F_before − F_after) / F_l
//! ```
//!
//! `D` is the prunable budget, `F_l` the block's full FLOPs, `F_before` the
//! realized FLOPs of decided blocks, `F_after` the full FLOPs of the
//! remaining blocks and `R` a reserve for the remaining blocks. With `R = 0`
//! these are the plain lower/upper bounds; the episode runner passes the
//! one-channel floor of the remaining blocks so they can always keep a
//! channel. Both bounds are clamped into `[0, 1 − 1/c]`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub desire: f64,
    pub before: f64,
    pub flops_l: f64,
    pub after: f64,
    pub reserve: f64,
    pub channels: usize,
    /// 1-based block index, for error messages.
    pub block: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub a_min: f64,
    pub a_max: f64,
    pub raw_min: f64,
    pub raw_max: f64,
}

pub fn action_cap(channels: usize) -> f64 {
    1.0 - 1.0 / channels as f64
}

pub fn action_bounds(x: &BoundInputs) -> Result<ActionBounds> {
    if x.flops_l <= 0.0 || x.channels == 0 {
        return Err(Error::InvalidArgument(format!(
            "block {}: FLOPs {} and channels {} must be positive",
            x.block, x.flops_l, x.channels
        )));
    }
    let raw_min = 1.0 - (x.desire - x.before - x.reserve) / x.flops_l;
    let raw_max = 1.0 - (x.desire - x.before - x.after) / x.flops_l;
    let cap = action_cap(x.channels);
    if raw_min > cap + 1e-12 {
        return Err(Error::InfeasibleBudget {
            block: x.block,
            detail: format!(
                "minimum pruning rate {raw_min:.4} exceeds the cap {cap:.4} for {} channels",
                x.channels
            ),
        });
    }
    let a_min = raw_min.clamp(0.0, cap);
    let a_max = raw_max.clamp(0.0, cap);
    if a_min > a_max {
        return Err(Error::InfeasibleBudget {
            block: x.block,
            detail: format!("a_min {a_min:.4} > a_max {a_max:.4}"),
        });
    }
    Ok(ActionBounds {
        a_min,
        a_max,
        raw_min,
        raw_max,
    })
}

pub fn bound_action(a_raw: f64, x: &BoundInputs) -> Result<(f64, ActionBounds)> {
    let b = action_bounds(x)?;
    Ok((a_raw.max(b.a_min).min(b.a_max), b))
}
