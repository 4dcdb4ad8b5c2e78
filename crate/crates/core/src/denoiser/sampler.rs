use serde::{Deserialize, Serialize};

use super::model::CooperativeDenoiser;
use super::schedule::{cfg_combine, ddim_step, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::moe::GatingDecision;
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::rng;
use crate::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub cfg_weight: f64,
    /// Only the deterministic sampler (`0`) is supported.
    pub eta: f64,
    /// Bound on |ẑ₀| per step in standardized latent units; `None` disables it.
    pub clip_x0: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 50,
            cfg_weight: 3.5,
            eta: 0.0,
            clip_x0: Some(3.0),
        }
    }
}

/// Per-token selection totals accumulated over a sampling run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    /// Mean over tokens of the number of (step, expert) selections, per block.
    pub per_block: Vec<f64>,
    pub steps: usize,
}

impl SelectionStats {
    pub fn mean(&self) -> f64 {
        if self.per_block.is_empty() {
            return 0.0;
        }
        self.per_block.iter().sum::<f64>() / self.per_block.len() as f64
    }
}

pub struct SampleOutput<T> {
    pub z_a: Tensor<T>,
    pub z_b: Tensor<T>,
    pub cond_evaluations: usize,
    pub uncond_evaluations: usize,
    /// Counted on the conditional branch.
    pub selections: SelectionStats,
}

/// Noise predictions for both persons; the tape is discarded.
pub fn predict<T: Real>(
    model: &CooperativeDenoiser,
    store: &ParamStore<T>,
    z_a: &Tensor<T>,
    z_b: &Tensor<T>,
    t: &[usize],
    tokens: &[&[u32]],
    null: bool,
) -> Result<(Tensor<T>, Tensor<T>, Vec<Option<GatingDecision<T>>>)> {
    let mut tape = Tape::bind(store, false);
    let a = tape.constant(z_a.clone());
    let b = tape.constant(z_b.clone());
    let text = if null {
        model.null_embedding(&mut tape, tokens.len())?
    } else {
        model.text_embedding(&mut tape, tokens, &vec![false; tokens.len()])?
    };
    let out = model.forward(&mut tape, a, b, t, text)?;
    Ok((tape.value(out.eps_a).clone(), tape.value(out.eps_b).clone(), out.decisions))
}

/// Deterministic DDIM with classifier-free guidance. Latents are
/// `[B·seg_len, W]` per person; initial noise comes from `seed`.
pub fn ddim_sample<T: Real>(
    model: &CooperativeDenoiser,
    store: &ParamStore<T>,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    tokens: &[&[u32]],
    seg_len: usize,
    seed: u64,
) -> Result<SampleOutput<T>> {
    if cfg.eta != 0.0 {
        return Err(invalid("ddim", format!("eta {} unsupported; sampling is deterministic", cfg.eta)));
    }
    if tokens.is_empty() || seg_len == 0 {
        return Err(invalid("ddim", "need at least one prompt and one latent frame"));
    }
    let b = tokens.len();
    let shape = [b * seg_len, model.latent_width];
    let mut r = rng::stream(seed, 0xDD1);
    let mut z_a = Tensor::randn(shape, 1.0, &mut r);
    let mut z_b = Tensor::randn(shape, 1.0, &mut r);
    let ts = schedule.ddim_timesteps(cfg.ddim_steps)?;
    let guided = cfg.cfg_weight != 1.0;
    let mut totals = vec![0.0; model.blocks.len()];
    let (mut n_cond, mut n_uncond) = (0, 0);
    for (i, &t) in ts.iter().enumerate() {
        let tv = vec![t; b];
        let (ca, cb, decisions) = predict(model, store, &z_a, &z_b, &tv, tokens, false)?;
        n_cond += 1;
        for (tot, d) in totals.iter_mut().zip(&decisions) {
            if let Some(d) = d {
                let per = d.experts_per_token();
                *tot += per.iter().sum::<usize>() as f64 / per.len() as f64;
            }
        }
        let (ea, eb) = if guided {
            let (ua, ub, _) = predict(model, store, &z_a, &z_b, &tv, tokens, true)?;
            n_uncond += 1;
            (cfg_combine(&ca, &ua, cfg.cfg_weight)?, cfg_combine(&cb, &ub, cfg.cfg_weight)?)
        } else {
            (ca, cb)
        };
        let ab_t = schedule.alpha_bar(t)?;
        let ab_prev = match ts.get(i + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        z_a = ddim_step(&z_a, &ea, ab_t, ab_prev, cfg.clip_x0)?;
        z_b = ddim_step(&z_b, &eb, ab_t, ab_prev, cfg.clip_x0)?;
    }
    Ok(SampleOutput {
        z_a,
        z_b,
        cond_evaluations: n_cond,
        uncond_evaluations: n_uncond,
        selections: SelectionStats {
            per_block: totals,
            steps: ts.len(),
        },
    })
}
