//! Toy RWKV-style language model with an exposed WKV state.

mod config;
mod model;
mod recurrence;
mod train;
mod weights;

pub use config::{RwkvConfig, KAPPA_NORM_FLOOR, LN_EPS, W_MIN};
pub use model::{
    check_tokens, forward, forward_graph, forward_with, generate, lm_loss, lm_loss_graph,
    read_states, ForwardVars, InitialState, ProjectionOverride,
};
pub use recurrence::{
    project_signals, transition_matrix, wkv_step, wkv_unrolled, TimestepSignals, WkvState,
};
pub use train::{batch_lm_loss, lm_train_step, sample_batch};
pub use weights::{BlockParams, RwkvWeights};
