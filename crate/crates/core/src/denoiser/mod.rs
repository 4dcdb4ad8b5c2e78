//! Cooperative two-person latent denoiser: weight-shared transformer stacks
//! with partner cross-attention, AdaLN conditioning and routed expert blocks,
//! plus the diffusion objective and guided DDIM sampling.

mod model;
mod sampler;
mod schedule;
mod train;

pub use model::{
    positional_table, timestep_embedding, AdaLn, Attention, CooperativeDenoiser, CrossSource, DenoiserBlock,
    DenoiserConfig, DenoiserOutput,
};
pub use sampler::{ddim_sample, predict, SampleOutput, SamplerConfig, SelectionStats};
pub use schedule::{cfg_combine, ddim_step, DiffusionConfig, NoiseSchedule};
pub use train::{
    sample_batch, train_denoiser, training_loss, DenoiserLogRow, DenoiserTrainConfig, LatentPair, TrainBatch,
};

#[cfg(test)]
mod tests;
