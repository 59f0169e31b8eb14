use serde::{Deserialize, Serialize};

use crate::model::flops::{full_breakdown, per_channel_flops};
use crate::model::{Architecture, BlockSpec};
use crate::{Error, Result};

pub const STATE_DIM: usize = 9;

/// Static per-run description of the pruning problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub blocks: Vec<BlockSpec>,
    /// MACs per inner channel of each block.
    pub unit_flops: Vec<u64>,
    pub total_prunable: u64,
    pub fixed_flops: u64,
    /// Prunable-FLOPs budget.
    pub desire: u64,
    pub max_channels: usize,
    pub max_stride: usize,
    pub max_kernel: usize,
}

impl EnvSpec {
    pub fn new(arch: &Architecture, desire: u64) -> Result<Self> {
        let full = full_breakdown(arch);
        let spec = EnvSpec {
            blocks: arch.blocks.clone(),
            unit_flops: arch.blocks.iter().map(per_channel_flops).collect(),
            total_prunable: full.prunable,
            fixed_flops: full.fixed,
            desire,
            max_channels: arch
                .blocks
                .iter()
                .map(|b| b.c_in.max(b.c_out))
                .max()
                .unwrap_or(1),
            max_stride: arch.blocks.iter().map(|b| b.stride).max().unwrap_or(1),
            max_kernel: arch.blocks.iter().map(|b| b.kernel).max().unwrap_or(1),
        };
        let floor = spec.min_prunable();
        if desire < floor {
            return Err(Error::Config(format!(
                "budget of {desire} prunable MACs is below the {floor} needed to keep one channel per block"
            )));
        }
        Ok(spec)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn full_flops(&self, l: usize) -> u64 {
        self.unit_flops[l] * self.blocks[l].inner as u64
    }

    /// Prunable FLOPs with every block reduced to a single channel.
    pub fn min_prunable(&self) -> u64 {
        self.unit_flops.iter().sum()
    }

    /// Realized prunable FLOPs for the given kept counts.
    pub fn realized(&self, kept: &[usize]) -> u64 {
        kept.iter().zip(&self.unit_flops).map(|(&k, &u)| k as u64 * u).sum()
    }
}

/// Environment state for block `l` (1-based): the nine raw components and
/// their normalized form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneState {
    pub l: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub kernel: usize,
    pub flops_l: f64,
    pub flops_before: f64,
    pub flops_after: f64,
    pub prev_action: f64,
    pub norm: [f64; STATE_DIM],
}

/// State of block `l` (1-based) given the kept counts of blocks `1..l` and
/// the executed action of block `l − 1`.
pub fn build_state(spec: &EnvSpec, l: usize, kept_so_far: &[usize], prev_action: f64) -> Result<PruneState> {
    let n = spec.num_blocks();
    if l == 0 || l > n {
        return Err(Error::InvalidArgument(format!("block index {l} outside 1..={n}")));
    }
    if kept_so_far.len() != l - 1 {
        return Err(Error::InvalidArgument(format!(
            "state for block {l} needs {} decided blocks, got {}",
            l - 1,
            kept_so_far.len()
        )));
    }
    let b = &spec.blocks[l - 1];
    let before: u64 = kept_so_far
        .iter()
        .zip(&spec.unit_flops)
        .map(|(&k, &u)| k as u64 * u)
        .sum();
    let after: u64 = (l..n).map(|j| spec.full_flops(j)).sum();
    let fl = spec.full_flops(l - 1);
    let tot = spec.total_prunable as f64;
    let norm = [
        l as f64 / n as f64,
        b.c_in as f64 / spec.max_channels as f64,
        b.c_out as f64 / spec.max_channels as f64,
        b.stride as f64 / spec.max_stride as f64,
        b.kernel as f64 / spec.max_kernel as f64,
        fl as f64 / tot,
        before as f64 / tot,
        after as f64 / tot,
        prev_action,
    ];
    Ok(PruneState {
        l,
        c_in: b.c_in,
        c_out: b.c_out,
        stride: b.stride,
        kernel: b.kernel,
        flops_l: fl as f64,
        flops_before: before as f64,
        flops_after: after as f64,
        prev_action,
        norm,
    })
}
