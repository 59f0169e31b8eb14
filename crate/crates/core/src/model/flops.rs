//! FLOPs accounting in multiply-accumulates of convolution and linear layers.

use serde::{Deserialize, Serialize};

use super::arch::{conv_out, Architecture, BlockKind, BlockSpec};
use crate::{Error, Result};

/// MACs contributed by a single inner channel of the block. Every inner
/// convolution is linear in the inner width, so the block's prunable FLOPs
/// are exactly `kept · per_channel_flops`.
pub fn per_channel_flops(spec: &BlockSpec) -> u64 {
    let k2 = (spec.kernel * spec.kernel) as u64;
    let out_hw = (spec.out_h * spec.out_w) as u64;
    let in_hw = (spec.in_h * spec.in_w) as u64;
    let (c_in, c_out) = (spec.c_in as u64, spec.c_out as u64);
    match spec.kind {
        BlockKind::Residual | BlockKind::PlainConv => (c_in + c_out) * k2 * out_hw,
        BlockKind::InvertedResidual => c_in * in_hw + k2 * out_hw + c_out * out_hw,
    }
}

/// Prunable MACs of a block with `kept` inner channels.
pub fn flops_of_block(spec: &BlockSpec, kept: usize) -> Result<u64> {
    if kept == 0 || kept > spec.inner {
        return Err(Error::InvalidArgument(format!(
            "block {}: kept {kept} outside 1..={}",
            spec.index, spec.inner
        )));
    }
    Ok(kept as u64 * per_channel_flops(spec))
}

/// MACs of the block that do not depend on the inner width (the 1×1
/// projection shortcut of a downsampling residual block).
pub fn fixed_block_flops(spec: &BlockSpec) -> u64 {
    if spec.has_projection_shortcut() {
        (spec.c_in * spec.c_out * spec.out_h * spec.out_w) as u64
    } else {
        0
    }
}

pub fn stem_flops(arch: &Architecture) -> u64 {
    let s = &arch.stem;
    let o = conv_out(arch.input_size, s.kernel, s.stride) as u64;
    (s.channels * arch.in_channels * s.kernel * s.kernel) as u64 * o * o
}

pub fn head_flops(arch: &Architecture) -> u64 {
    let last = arch.blocks.last().map_or(arch.stem.channels, |b| b.c_out);
    (last * arch.num_classes) as u64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub per_block: Vec<u64>,
    pub prunable: u64,
    pub stem: u64,
    pub head: u64,
    pub shortcuts: u64,
    /// stem + head + shortcuts.
    pub fixed: u64,
    pub total: u64,
}

/// Breakdown for the given kept counts (one per block).
pub fn breakdown(arch: &Architecture, kept: &[usize]) -> Result<FlopsBreakdown> {
    if kept.len() != arch.blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} kept counts for {} blocks",
            kept.len(),
            arch.blocks.len()
        )));
    }
    let per_block = arch
        .blocks
        .iter()
        .zip(kept)
        .map(|(b, &k)| flops_of_block(b, k))
        .collect::<Result<Vec<_>>>()?;
    let prunable = per_block.iter().sum();
    let stem = stem_flops(arch);
    let head = head_flops(arch);
    let shortcuts = arch.blocks.iter().map(fixed_block_flops).sum();
    let fixed = stem + head + shortcuts;
    Ok(FlopsBreakdown {
        per_block,
        prunable,
        stem,
        head,
        shortcuts,
        fixed,
        total: prunable + fixed,
    })
}

pub fn full_breakdown(arch: &Architecture) -> FlopsBreakdown {
    let kept: Vec<usize> = arch.blocks.iter().map(|b| b.inner).collect();
    breakdown(arch, &kept).expect("full widths are valid")
}

/// Prunable-FLOPs budget equivalent to removing `prune_frac` of the whole
/// model's FLOPs, with the fixed cost left untouched.
pub fn prunable_budget(full: &FlopsBreakdown, prune_frac: f64) -> Result<u64> {
    if !(0.0..1.0).contains(&prune_frac) {
        return Err(Error::Config(format!("pruning rate {prune_frac} outside [0, 1)")));
    }
    let keep_total = ((1.0 - prune_frac) * full.total as f64).floor() as i128;
    let budget = keep_total - full.fixed as i128;
    if budget <= 0 {
        return Err(Error::Config(format!(
            "pruning {:.1}% of {} MACs leaves nothing for the prunable blocks (fixed cost {})",
            prune_frac * 100.0,
            full.total,
            full.fixed
        )));
    }
    Ok(budget.min(full.prunable as i128) as u64)
}
