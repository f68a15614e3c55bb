//! Forward noising, the cross-attention denoiser, and its generative
//! pretraining loop.

mod denoiser;
mod pretrain;
mod schedule;

pub use denoiser::{
    denoiser_forward, sinusoid_embedding, AttentionRecord, BlockParams, Denoiser, DenoiserTrace,
    DenoiserVars, ResolvedPrompts,
};
pub use pretrain::{pretrain, PretrainConfig};
pub use schedule::{make_schedule, noise_latent, NoiseSchedule};
