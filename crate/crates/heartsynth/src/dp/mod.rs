//! Differential privacy: RDP accounting, the sanitized gradient step, and
//! the private fine-tuning loop that ties them to the denoiser.

pub mod accountant;
pub mod finetune;
pub mod sgd;

pub use accountant::{
    calibrate_noise, epsilon_spent, AccountantError, PrivacyLedger, PrivacyReport, PrivacySpec,
    DEFAULT_DELTA,
};
pub use finetune::{dp_finetune, DpFinetuneError, DpFinetuneOpts};
pub use sgd::{clip_per_sample, noise_and_aggregate, poisson_sample};
