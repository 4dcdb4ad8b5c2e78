//! Small layer building blocks shared by the VAE and the denoiser.

use rand::Rng;

use super::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::Result;

/// Affine map `x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/√in` weights, zero bias.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform([in_dim, out_dim], bound, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([in_dim, out_dim]));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron with a SiLU between the layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.silu(h)?;
        self.fc2.forward(tape, h)
    }
}

/// Mean squared error between two equally shaped tensors.
pub fn mse<T: Real>(tape: &mut Tape<'_, T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Mean absolute error between two equally shaped tensors.
pub fn l1<T: Real>(tape: &mut Tape<'_, T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let ab = tape.abs(d)?;
    tape.mean(ab)
}
