use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::motion::FEATURE_DIM;
use crate::numerics::nn::l1;
use crate::numerics::{Tape, Var};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeLossWeights {
    pub pos: f64,
    pub vel: f64,
    pub kl: f64,
}

impl Default for VaeLossWeights {
    fn default() -> Self {
        Self {
            pos: 0.5,
            vel: 0.5,
            kl: 0.02,
        }
    }
}

impl VaeLossWeights {
    /// Weighted total of `[feature, pos, vel, kl]` term values.
    pub fn total(&self, terms: [f64; 4]) -> f64 {
        terms[0] + self.pos * terms[1] + self.vel * terms[2] + self.kl * terms[3]
    }
}

/// Tape handles for the total and each term.
#[derive(Clone, Copy, Debug)]
pub struct VaeLoss {
    pub total: Var,
    pub feature: Var,
    pub pos: Var,
    pub vel: Var,
    pub kl: Var,
}

impl VaeLoss {
    pub fn values<T: Real>(&self, tape: &Tape<'_, T>) -> [f64; 5] {
        [self.total, self.feature, self.pos, self.vel, self.kl].map(|v| tape.value(v).item().as_f64())
    }
}

/// Mean closed-form `KL(N(μ, e^{logvar}) ‖ N(0, 1))` per latent element.
pub fn gaussian_kl<T: Real>(tape: &mut Tape<'_, T>, mean: Var, logvar: Var) -> Result<Var> {
    let m2 = tape.square(mean)?;
    let var = tape.exp(logvar)?;
    let s = tape.add(m2, var)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -T::one())?;
    let k = tape.mean(s)?;
    tape.scale(k, T::of(0.5))
}

/// L1 feature, position and velocity terms plus KL, on `[..., 12]` tensors.
pub fn vae_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    recon: Var,
    target: Var,
    mean: Var,
    logvar: Var,
    weights: &VaeLossWeights,
) -> Result<VaeLoss> {
    if tape.shape(recon) != tape.shape(target) || tape.shape(recon).last() != Some(&FEATURE_DIM) {
        return Err(shape_err("vae_loss", tape.shape(recon), tape.shape(target)));
    }
    let rows = tape.value(recon).numel() / FEATURE_DIM;
    let r = tape.reshape(recon, [rows, FEATURE_DIM])?;
    let t = tape.reshape(target, [rows, FEATURE_DIM])?;
    let feature = l1(tape, r, t)?;
    let rp = tape.slice_cols(r, 0, 3)?;
    let tp = tape.slice_cols(t, 0, 3)?;
    let pos = l1(tape, rp, tp)?;
    let rv = tape.slice_cols(r, 3, 3)?;
    let tv = tape.slice_cols(t, 3, 3)?;
    let vel = l1(tape, rv, tv)?;
    let kl = gaussian_kl(tape, mean, logvar)?;
    let a = tape.scale(pos, T::of(weights.pos))?;
    let b = tape.scale(vel, T::of(weights.vel))?;
    let c = tape.scale(kl, T::of(weights.kl))?;
    let total = tape.add(feature, a)?;
    let total = tape.add(total, b)?;
    let total = tape.add(total, c)?;
    Ok(VaeLoss {
        total,
        feature,
        pos,
        vel,
        kl,
    })
}
