//! Few-shot image-text matching scored from the cross-attention maps of a
//! toy latent diffusion denoiser.
//!
//! The crate is organized around a small dense-tensor autodiff engine
//! ([`numerics`]), a deterministic compositional-shapes dataset ([`data`]),
//! toy text/image encoders ([`encoders`]), an epsilon-prediction denoiser
//! with attention capture ([`diffusion`]), attention-map scoring
//! ([`scoring`]), few-shot prompt adaptation ([`adapt`]) and persistence /
//! reporting plumbing ([`checkpoint`], [`report`]).
//!
//! Everything is f64, single-threaded per pass, and bit-deterministic given
//! a seed.

pub mod adapt;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod report;
pub mod rng;
pub mod scoring;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelVars};
pub use numerics::{Graph, NodeId, Tensor};
