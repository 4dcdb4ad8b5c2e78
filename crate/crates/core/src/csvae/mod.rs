//! Causal-skeletal VAE: skeletal graph convolutions, causal temporal
//! convolutions and joint/frame pooling, compressing one person's clip into
//! a short latent sequence.

mod layers;
mod loss;
mod model;
mod train;

pub use layers::{
    pair_average_matrix, skeletal_pool, skeletal_unpool, temporal_pool, temporal_unpool, CausalConv, SkeletalConv,
};
pub use loss::{gaussian_kl, vae_loss, VaeLoss, VaeLossWeights};
pub use model::{CsVae, Encoded, VaeConfig};
pub use train::{batch_tensor, person_clips, train_vae, VaeLogRow, VaeTrainConfig};
