//! Denoising diffusion over flat vectors with a conditional transformer.

mod dit;
mod loss;
mod noise;
mod sample;
mod schedule;

pub use dit::{
    dit_forward, dit_forward_graph, timestep_embedding, Denoiser, DiT, DiTBlock, DiTConfig,
    DiTWeights,
};
pub use loss::{
    diffusion_loss_with, dit_loss_graph, dit_train_step, draw_noise, state_diffusion_loss,
    NoiseDraw, StateExample,
};
pub use noise::{
    interpolate_noise, lowpass_window, structured_noise, NoiseMode, NoiseSpec, LOWPASS_MAX_WINDOW,
    SLERP_MIN_ANGLE,
};
pub use sample::{
    ddpm_sample, ddpm_sample_standardized, sample_strided, strided_timesteps, SamplerMode,
};
pub use schedule::{q_sample, DiffusionSchedule};
