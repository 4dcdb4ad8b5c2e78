//! Latent-diffusion generation of two-person interactions with a dynamic
//! temporal-selective mixture-of-experts denoiser.

pub mod csvae;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod moe;
pub mod motion;
pub mod numerics;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
pub use numerics::{ParamStore, Precision, Real, Tape, Tensor, Var};
