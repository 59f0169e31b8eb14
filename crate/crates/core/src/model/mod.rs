//! Block-structured CNNs with prunable inner channels.

pub mod align;
pub mod arch;
pub mod eval;
pub mod flops;
pub mod mask;
pub mod network;
pub mod prune;

pub use align::{train_step_weights, AlignGrouping, StepLosses, WeightLoss};
pub use arch::{ArchDescription, Architecture, BlockKind, BlockSpec};
pub use flops::{flops_of_block, FlopsBreakdown};
pub use mask::{mask_from_action, rank_channels_l1, ArchMask};
pub use network::{ForwardOpts, PrunableModel};
