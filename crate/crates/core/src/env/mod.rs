//! The pruning MDP: state construction, action bounds, episodes and replay.

pub mod bounds;
pub mod episode;
pub mod replay;
pub mod state;

pub use bounds::{action_bounds, bound_action, ActionBounds, BoundInputs};
pub use episode::{run_episode, Episode, StepRecord};
pub use replay::{ReplayBuffer, Transition};
pub use state::{build_state, EnvSpec, PruneState, STATE_DIM};
