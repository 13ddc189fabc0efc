//! End-to-end differentially private synthesis of attribute-conditioned
//! 3D cardiac MR volumes.
//!
//! The pipeline: generate phantom exams with known anatomy, compress
//! volumes into a compact latent space, train a conditional latent
//! diffusion model (optionally fine-tuned under DP-SGD with a Rényi
//! accountant), sample new volumes under classifier-free guidance, and
//! score the output with distribution, diversity, and conditioning
//! metrics.

pub mod compressor;
pub mod context;
pub mod data;
pub mod diffusion;
pub mod dp;
pub mod eval;
pub mod io;
pub mod nn;
pub mod phantom;
pub mod sampler;
pub mod volume;
