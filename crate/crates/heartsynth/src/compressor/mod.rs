//! Volume compression stage: the autoencoder bridging pixel space and
//! the latent space the diffusion model works in.

pub mod model;
pub mod train;

pub use model::{
    Bottleneck, Compressor, CompressorCache, CompressorConfig, CompressorError, CompressorKind,
    CompressorLosses, SPATIAL_FACTOR,
};
pub use train::{
    load_compressor, train_compressor, CompressorMeta, TrainCompressorError, TrainCompressorOpts,
};
