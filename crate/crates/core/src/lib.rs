//! Joint weight training and reinforcement-learned structured pruning for
//! block-structured convolutional networks.
//!
//! A soft actor-critic agent picks per-block pruning ratios while the network
//! is trained. Because the weights keep moving, the agent's reward drifts from
//! epoch to epoch; a recurrent model over learned epoch embeddings summarizes
//! that drift into a representation `z` that conditions the policy, critics
//! and a reward decoder. A group-lasso term pulls the weights toward the best
//! sub-network found so far so the final physical prune is nearly lossless.
//!
//! Module map:
//!
//! * [`tensor`] dense tensors, reverse-mode autodiff, optimizers, checkpoints
//! * [`model`] block architectures, FLOPs accounting, masks, pruning, alignment loss
//! * [`env`] pruning MDP state, action bounds, episodes, replay buffer
//! * [`dynamics`] epoch embeddings, GRU environment model, reward decoder
//! * [`sac`] soft actor-critic agent conditioned on `z`
//! * [`orchestrator`] the per-epoch joint training loop and ablation drivers
//! * [`data`] CIFAR-10 reader, synthetic datasets, reward subsets, augmentation
//! * [`config`], [`metrics`], [`report`] run configuration and reporting surface

pub mod config;
pub mod data;
pub mod dynamics;
pub mod env;
mod error;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod par;
pub mod report;
pub mod sac;
pub mod tensor;

pub use error::{Error, Result};
