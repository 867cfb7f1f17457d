//! Dynamic projection parameters generated by a diffusion transformer and
//! fused with the static ones.

mod params;
mod train;

pub use params::{
    fuse_graph, fuse_params, logit, param_dit_config, sigmoid, split_theta, split_theta_graph,
    theta_len, theta_static, theta_static_graph, HybridConfig, HybridParams, ParamNormalizer,
    PARAM_STD_FLOOR,
};
pub use train::{
    condition_graph, generate_params, generate_params_from, generate_params_graph,
    global_condition, hybrid_logits, joint_train_step, param_diffusion_loss,
    param_diffusion_loss_graph, single_step_x0, total_loss, ConditionVector, GenMode, JointLosses,
    StepOptions, MIN_ALPHA_BAR_T,
};
