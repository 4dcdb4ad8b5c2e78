//! Run orchestration: configuration, checkpoints, the corpus → VAE →
//! denoiser → samples → metrics stages, routing ablations and self-checks.

mod ablation;
mod checkpoint;
mod config;
mod stages;
pub mod verify;

pub use ablation::{
    default_grid, parse_grid, run_ablation, summary_header, AblationOutcome, GridPoint, ModeComparison, PointResult,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC};
pub use config::{AblationConfig, CorpusConfig, RunConfig};
pub use stages::{
    eval_stage, fit_denoiser, gen_corpus, generate, latent_pairs, load_samples, moving_average, noise_decoded,
    sample_stage, save_denoiser, train_denoiser_stage, train_vae_stage, Corpus, CorpusSplit, DenoiserArch, EvalRecord,
    LatentScale, LoadedDenoiser, LoadedVae, RunPaths, RunRecord, SampleEntry,
};

#[cfg(test)]
mod tests;
