use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{vae_loss, VaeLossWeights};
use super::model::CsVae;
use crate::error::{invalid, Result};
use crate::motion::{InteractionSample, Normalizer, FEATURE_DIM};
use crate::numerics::{AdamW, AdamWConfig, CosineSchedule, ParamStore, Tape, Tensor};
use crate::rng;
use crate::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weights: VaeLossWeights,
    /// Sample latents with the reparameterization trick; `false` trains on the mean.
    pub stochastic: bool,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 4e-3,
            warmup: 100,
            weights: VaeLossWeights::default(),
            stochastic: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VaeLogRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub feature: f64,
    pub pos: f64,
    pub vel: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

/// Normalized single-person clips: both partners of every sample, `T·J·12` values each.
pub fn person_clips(samples: &[InteractionSample], norm: &Normalizer) -> Vec<Vec<f32>> {
    samples
        .iter()
        .flat_map(|s| [norm.normalize(&s.motion_a), norm.normalize(&s.motion_b)])
        .collect()
}

/// Stacks clips into `[B, T, J, 12]`.
pub fn batch_tensor<T: Real>(clips: &[&[f32]], frames: usize, joints: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(clips.len() * frames * joints * FEATURE_DIM);
    for c in clips {
        data.extend(c.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new([clips.len(), frames, joints, FEATURE_DIM], data)
}

pub fn train_vae<T: Real>(
    store: &mut ParamStore<T>,
    vae: &CsVae,
    clips: &[Vec<f32>],
    frames: usize,
    cfg: &VaeTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&VaeLogRow),
) -> Result<Vec<VaeLogRow>> {
    if clips.is_empty() || cfg.batch == 0 {
        return Err(invalid("train_vae", "need clips and a positive batch size"));
    }
    let joints = vae.topology().joint_count();
    let t_lat = vae.latent_frames(frames)?;
    let mut rng = rng::stream(seed, 0x7AE);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        },
        store,
    );
    let sched = CosineSchedule {
        max_lr: cfg.lr,
        warmup: cfg.warmup,
        total: cfg.steps,
    };
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<&[f32]> = (0..cfg.batch)
            .map(|_| clips[rng.random_range(0..clips.len())].as_slice())
            .collect();
        let x = batch_tensor::<T>(&picks, frames, joints)?;
        let noise = cfg.stochastic.then(|| {
            Tensor::randn([cfg.batch, t_lat, vae.latent_joints(), vae.config().latent_dim], 1.0, &mut rng)
        });
        let (values, grads) = {
            let mut tape = Tape::bind(store, true);
            let xv = tape.constant(x);
            let enc = vae.encode(&mut tape, xv, noise.as_ref())?;
            let recon = vae.decode(&mut tape, enc.z)?;
            let loss = vae_loss(&mut tape, recon, xv, enc.mean, enc.logvar, &cfg.weights)?;
            let values = loss.values(&tape);
            (values, tape.backward(loss.total)?.params(&tape))
        };
        let lr = sched.lr(step);
        let grad_norm = opt.step(store, &grads, lr);
        let row = VaeLogRow {
            step,
            lr,
            total: values[0],
            feature: values[1],
            pos: values[2],
            vel: values[3],
            kl: values[4],
            grad_norm,
        };
        on_step(&row);
        log.push(row);
    }
    Ok(log)
}
