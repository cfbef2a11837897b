//! Noise schedules, the forward process, denoisers, guidance and samplers.

mod denoiser;
mod process;
mod sampler;
mod schedule;
pub(crate) mod unet;

pub use denoiser::{
    prepare_batch, training_loss, training_loss_with, Condition, Denoiser, NoisePredictor,
    PreparedBatch, TrainBatch, TrainConfig, TrainReport, DEFAULT_P_UNCOND,
};
pub use process::{
    eps_from_v, eps_from_v_alpha, forward_diffuse, forward_diffuse_alpha, forward_diffuse_batch,
    gaussian_noise, output_to_eps, training_target, v_from_eps, v_from_eps_alpha, PredictionType,
};
pub use sampler::{
    cfg_combine, cfg_predict, ddim_sample, denoise_from, organ_defaults, timesteps, OrganDefaults,
    SamplerConfig, SchedulerKind, StepHook,
};
pub use schedule::{build_schedule, NoiseSchedule, ScheduleKind, ScheduleParams};
pub use unet::{ArchDescriptor, ModelSize};

use ndarray::Array4;

/// Maps images to the space diffusion runs in. Models here work directly on
/// pixels, so the only implementation is the identity.
pub trait LatentCodec<T> {
    fn encode(&self, x: &Array4<T>) -> Array4<T>;
    fn decode(&self, z: &Array4<T>) -> Array4<T>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl<T: Clone> LatentCodec<T> for IdentityCodec {
    fn encode(&self, x: &Array4<T>) -> Array4<T> {
        x.clone()
    }

    fn decode(&self, z: &Array4<T>) -> Array4<T> {
        z.clone()
    }
}
