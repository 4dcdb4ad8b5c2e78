use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{CooperativeDenoiser, DenoiserOutput};
use super::schedule::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::moe::{telemetry_rows, TelemetryRow};
use crate::numerics::nn::mse;
use crate::numerics::{AdamW, AdamWConfig, CosineSchedule, ParamStore, Tape, Tensor, Var};
use crate::rng;
use crate::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Probability of replacing a prompt by the null embedding.
    pub cond_dropout: f64,
    /// Routing telemetry is emitted every this many steps.
    pub telemetry_every: usize,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch: 16,
            lr: 1e-3,
            warmup: 200,
            cond_dropout: 0.1,
            telemetry_every: 10,
        }
    }
}

/// One training pair in normalized latent space, `[T'·W]` per person.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub a: Vec<f32>,
    pub b: Vec<f32>,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DenoiserLogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Inputs of one training step.
pub struct TrainBatch<T> {
    pub z0_a: Tensor<T>,
    pub z0_b: Tensor<T>,
    pub noise_a: Tensor<T>,
    pub noise_b: Tensor<T>,
    pub t: Vec<usize>,
    pub tokens: Vec<Vec<u32>>,
    pub drop: Vec<bool>,
}

/// Noise-prediction MSE over both persons.
pub fn training_loss<T: Real>(
    model: &CooperativeDenoiser,
    tape: &mut Tape<'_, T>,
    schedule: &NoiseSchedule,
    batch: &TrainBatch<T>,
) -> Result<(Var, DenoiserOutput<T>)> {
    let za = tape.constant(schedule.q_sample(&batch.z0_a, &batch.t, &batch.noise_a)?);
    let zb = tape.constant(schedule.q_sample(&batch.z0_b, &batch.t, &batch.noise_b)?);
    let toks: Vec<&[u32]> = batch.tokens.iter().map(Vec::as_slice).collect();
    let text = model.text_embedding(tape, &toks, &batch.drop)?;
    let out = model.forward(tape, za, zb, &batch.t, text)?;
    let pred = tape.concat_rows(&[out.eps_a, out.eps_b])?;
    let target = Tensor::concat_rows(&[&batch.noise_a, &batch.noise_b])?;
    let target = tape.constant(target);
    Ok((mse(tape, pred, target)?, out))
}

fn stack<T: Real>(rows: &[&[f32]], seg_len: usize, width: usize) -> Result<Tensor<T>> {
    let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::of(v as f64))).collect();
    Tensor::new([rows.len() * seg_len, width], data)
}

/// Draws a seeded batch: samples, timesteps, noise and condition dropout.
pub fn sample_batch<T: Real, R: Rng + ?Sized>(
    data: &[LatentPair],
    seg_len: usize,
    width: usize,
    batch: usize,
    train_steps: usize,
    cond_dropout: f64,
    rng: &mut R,
) -> Result<TrainBatch<T>> {
    let picks: Vec<&LatentPair> = (0..batch).map(|_| &data[rng.random_range(0..data.len())]).collect();
    let t = (0..batch).map(|_| rng.random_range(0..train_steps)).collect();
    let drop = (0..batch).map(|_| rng.random::<f64>() < cond_dropout).collect();
    let shape = [batch * seg_len, width];
    Ok(TrainBatch {
        z0_a: stack(&picks.iter().map(|p| p.a.as_slice()).collect::<Vec<_>>(), seg_len, width)?,
        z0_b: stack(&picks.iter().map(|p| p.b.as_slice()).collect::<Vec<_>>(), seg_len, width)?,
        noise_a: Tensor::randn(shape, 1.0, rng),
        noise_b: Tensor::randn(shape, 1.0, rng),
        t,
        tokens: picks.iter().map(|p| p.tokens.clone()).collect(),
        drop,
    })
}

/// Trains `model` on latent pairs and updates the routing biases after every
/// step. `on_step` receives the log row and, on telemetry steps, the routing rows.
pub fn train_denoiser<T: Real>(
    store: &mut ParamStore<T>,
    model: &mut CooperativeDenoiser,
    schedule: &NoiseSchedule,
    data: &[LatentPair],
    seg_len: usize,
    cfg: &DenoiserTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&DenoiserLogRow, &[TelemetryRow]),
) -> Result<Vec<DenoiserLogRow>> {
    if data.is_empty() || cfg.batch == 0 || seg_len == 0 {
        return Err(invalid("train_denoiser", "need data, a positive batch and latent length"));
    }
    let width = model.latent_width;
    if data.iter().any(|p| p.a.len() != seg_len * width || p.b.len() != seg_len * width) {
        return Err(invalid("train_denoiser", format!("latents must hold {seg_len}x{width} values")));
    }
    let mut r = rng::stream(seed, 0xDE5);
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
        let batch = sample_batch::<T, _>(data, seg_len, width, cfg.batch, schedule.len(), cfg.cond_dropout, &mut r)?;
        let (loss, grads, decisions) = {
            let mut tape = Tape::bind(store, true);
            let (loss, out) = training_loss(model, &mut tape, schedule, &batch)?;
            let value = tape.value(loss).item().as_f64();
            (value, tape.backward(loss)?.params(&tape), out.decisions)
        };
        if !loss.is_finite() {
            return Err(crate::Error::NonFinite { op: "denoiser loss" });
        }
        let lr = sched.lr(step);
        let grad_norm = opt.step(store, &grads, lr);
        model.update_biases(&decisions)?;
        let mut rows = Vec::new();
        if cfg.telemetry_every > 0 && step % cfg.telemetry_every == 0 {
            for (block, (layer, d)) in model.moe_layers().zip(&decisions).enumerate() {
                if let Some(d) = d {
                    rows.extend(telemetry_rows(step as u64, block, d, layer.expected_load(d), &layer.bias));
                }
            }
        }
        let row = DenoiserLogRow {
            step,
            lr,
            loss,
            grad_norm,
        };
        on_step(&row, &rows);
        log.push(row);
    }
    Ok(log)
}
