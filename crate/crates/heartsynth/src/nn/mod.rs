//! Minimal deterministic neural-network toolkit.
//!
//! Everything runs single-sample on the CPU with hand-written backward
//! passes. Parameters live in one flat `f32` vector ([`param::ParamStore`])
//! so checkpointing, per-sample gradient clipping, and noise addition all
//! operate on a single contiguous slice.

pub mod ops;
pub mod optim;
pub mod param;

pub use ops::{
    add_channel_bias, concat_channels, cross_entropy_and_grad, from_tokens, l1_and_grad,
    mse_and_grad, sigmoid, silu, silu_grad, sinusoidal_embedding, softmax, to_tokens, upsample2x,
    upsample2x_backward, AttentionCache, Conv1x1, Conv1x3x3, GroupNorm, GroupNormCache, Linear,
    MultiHeadAttention,
};
pub use optim::{Adam, Sgd};
pub use param::{he_std, xavier_std, GradBuf, ParamId, ParamStore};
