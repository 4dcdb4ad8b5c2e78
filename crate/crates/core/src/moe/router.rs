use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::numerics::nn::Linear;
use crate::numerics::{ParamStore, Tape, Var};
use crate::Real;

/// Motion and text routers whose logits are blended with weight `alpha`.
#[derive(Clone, Debug)]
pub struct SynergisticRouter {
    pub motion: Linear,
    pub text: Linear,
    pub alpha: f64,
}

impl SynergisticRouter {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        model_dim: usize,
        text_dim: usize,
        n_experts: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(invalid("router", format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Self {
            motion: Linear::new(store, &format!("{name}.motion"), model_dim, n_experts, true, rng),
            text: Linear::new(store, &format!("{name}.text"), text_dim, n_experts, true, rng),
            alpha,
        })
    }

    /// `[S, D]` pool → `[S, N]` logits, one linear map per expert column.
    pub fn route_motion<T: Real>(&self, tape: &mut Tape<'_, T>, pool: Var) -> Result<Var> {
        self.motion.forward(tape, pool)
    }

    /// `[B, D_t]` prompts → `[B·seg_len, N]`, each sample's row repeated over its tokens.
    pub fn route_text<T: Real>(&self, tape: &mut Tape<'_, T>, text: Var, seg_len: usize) -> Result<Var> {
        let r = self.text.forward(tape, text)?;
        tape.repeat_rows(r, seg_len)
    }

    pub fn route<T: Real>(&self, tape: &mut Tape<'_, T>, pool: Var, text: Var, seg_len: usize) -> Result<RouterLogits> {
        let motion = self.route_motion(tape, pool)?;
        let text = self.route_text(tape, text, seg_len)?;
        let combined = combine_logits(tape, motion, text, self.alpha)?;
        Ok(RouterLogits { motion, text, combined })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RouterLogits {
    pub motion: Var,
    pub text: Var,
    pub combined: Var,
}

/// `α·R_motion + (1 − α)·R_text`; `α` of exactly 0 or 1 passes one side through untouched.
pub fn combine_logits<T: Real>(tape: &mut Tape<'_, T>, motion: Var, text: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid("combine_logits", format!("alpha {alpha} outside [0, 1]")));
    }
    if tape.shape(motion) != tape.shape(text) {
        return Err(shape_err("combine_logits", tape.shape(motion), tape.shape(text)));
    }
    if alpha == 1.0 {
        return Ok(motion);
    }
    if alpha == 0.0 {
        return Ok(text);
    }
    let m = tape.scale(motion, T::of(alpha))?;
    let t = tape.scale(text, T::of(1.0 - alpha))?;
    tape.add(m, t)
}
