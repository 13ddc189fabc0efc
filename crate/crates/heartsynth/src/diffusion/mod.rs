//! Latent diffusion: noise schedule, context encoder, denoiser, loss.

pub mod context_embed;
pub mod loss;
pub mod schedule;
pub mod train;
pub mod unet;

pub use context_embed::{ContextCache, ContextEncoder, DEFAULT_EMBED_DIM};
pub use loss::{diffusion_loss, masked_mse_and_grad, CTX_DROPOUT_P};
pub use schedule::{
    build_schedule, default_schedule, forward_diffuse, NoiseSchedule, ScheduleError,
    DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS,
};
pub use train::{load_denoiser, train_ldm, LdmMeta, TrainLdmError, TrainLdmOpts};
pub use unet::{Denoiser, DenoiserCache, DenoiserConfig};
