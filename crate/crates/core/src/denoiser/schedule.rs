use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::numerics::Tensor;
use crate::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    /// Offset of the cosine schedule.
    pub cosine_offset: f64,
    pub max_beta: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            cosine_offset: 0.008,
            max_beta: 0.999,
        }
    }
}

/// Cumulative signal coefficients `ᾱ_t` of a cosine schedule, ε-prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &DiffusionConfig) -> Result<Self> {
        let n = cfg.train_steps;
        if n == 0 {
            return Err(invalid("schedule", "train_steps must be positive"));
        }
        let f = |t: f64| {
            let x = (t / n as f64 + cfg.cosine_offset) / (1.0 + cfg.cosine_offset) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let mut acc = 1.0;
        let alpha_bar = (0..n)
            .map(|t| {
                let beta = (1.0 - f(t as f64 + 1.0) / f(t as f64)).min(cfg.max_beta);
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Ok(Self { alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| invalid("schedule", format!("timestep {t} outside 0..{}", self.len())))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·noise`, rows of `z0` belonging to sample
    /// `i` use timestep `t[i]`.
    pub fn q_sample<T: Real>(&self, z0: &Tensor<T>, t: &[usize], noise: &Tensor<T>) -> Result<Tensor<T>> {
        if z0.shape() != noise.shape() {
            return Err(shape_err("q_sample", z0.shape(), noise.shape()));
        }
        if t.is_empty() || z0.numel() % t.len() != 0 {
            return Err(invalid("q_sample", format!("{} values for {} timesteps", z0.numel(), t.len())));
        }
        let per = z0.numel() / t.len();
        let mut out = Vec::with_capacity(z0.numel());
        for (i, &ti) in t.iter().enumerate() {
            let ab = self.alpha_bar(ti)?;
            let (a, s) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
            let range = i * per..(i + 1) * per;
            out.extend(z0.data()[range.clone()].iter().zip(&noise.data()[range]).map(|(&x, &e)| a * x + s * e));
        }
        Tensor::new(z0.shape().to_vec(), out)
    }

    /// Evenly spaced descending timesteps for a `steps`-step DDIM run.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.len() {
            return Err(invalid("ddim", format!("{steps} steps with a {}-step schedule", self.len())));
        }
        let stride = self.len() / steps;
        Ok((0..steps).rev().map(|i| i * stride + (self.len() - 1 - (steps - 1) * stride)).collect())
    }
}

/// `ε_u + w·(ε_c − ε_u)`; `w = 1` returns `ε_c` unchanged.
pub fn cfg_combine<T: Real>(cond: &Tensor<T>, uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if cond.shape() != uncond.shape() {
        return Err(shape_err("cfg_combine", cond.shape(), uncond.shape()));
    }
    if w == 1.0 {
        return Ok(cond.clone());
    }
    if w == 0.0 {
        return Ok(uncond.clone());
    }
    let w = T::of(w);
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(&c, &u)| u + w * (c - u))
        .collect();
    Tensor::new(cond.shape().to_vec(), data)
}

/// One deterministic DDIM update from `t` to `t_prev` (`None` = clean).
pub fn ddim_step<T: Real>(z: &Tensor<T>, eps: &Tensor<T>, ab_t: f64, ab_prev: f64, clip_x0: Option<f64>) -> Result<Tensor<T>> {
    if z.shape() != eps.shape() {
        return Err(shape_err("ddim_step", z.shape(), eps.shape()));
    }
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| {
            let (x, e) = (x.as_f64(), e.as_f64());
            let x0 = (x - sb * e) / sa;
            let (x0, e) = match clip_x0 {
                // Clamp the clean estimate and re-derive the noise from it.
                Some(c) if x0.abs() > c => {
                    let x0 = x0.clamp(-c, c);
                    (x0, if sb > 0.0 { (x - sa * x0) / sb } else { e })
                }
                _ => (x0, e),
            };
            T::of(pa * x0 + pb * e)
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}
