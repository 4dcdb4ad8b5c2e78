use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::motion::{mean_matrix, pool_matrix, unpool_matrix, PoolingLevel};
use crate::numerics::nn::Linear;
use crate::numerics::{interpolation_matrix, ConvGeometry, ParamId, ParamStore, Tape, Tensor, Var};
use crate::Real;

/// Graph convolution over the joint axis of `[B, T, J, C]`:
/// `Θ1·x_j + mean_{n ∈ N(j)} Θ·x_n`.
#[derive(Clone, Debug)]
pub struct SkeletalConv {
    pub self_map: Linear,
    pub neighbor_map: Linear,
    /// Row-normalized adjacency `[J, J]`; an isolated joint has a zero row.
    adjacency: Vec<Vec<usize>>,
}

impl SkeletalConv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        adjacency: Vec<Vec<usize>>,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            self_map: Linear::new(store, &format!("{name}.self"), c_in, c_out, true, rng),
            neighbor_map: Linear::new(store, &format!("{name}.neighbor"), c_in, c_out, false, rng),
            adjacency,
        }
    }

    pub fn joints(&self) -> usize {
        self.adjacency.len()
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [b, t, j, _]: [usize; 4] = shape
            .as_slice()
            .try_into()
            .map_err(|_| invalid("skeletal_conv", format!("expected [B, T, J, C], got {shape:?}")))?;
        if j != self.joints() {
            return Err(invalid(
                "skeletal_conv",
                format!("layer built for {} joints, input has {j}", self.joints()),
            ));
        }
        let own = self.self_map.forward(tape, x)?;
        let nb = self.neighbor_map.forward(tape, x)?;
        let m = Arc::new(mean_matrix::<T>(&self.adjacency));
        let nb = tape.mix(nb, m, b * t)?;
        let c_out = self.self_map.out_dim;
        let nb = tape.reshape(nb, [b, t, j, c_out])?;
        tape.add(own, nb)
    }
}

/// Temporal convolution over `[B, T, J, C]` with causal left padding, shared across joints.
#[derive(Clone, Debug)]
pub struct CausalConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: ConvGeometry,
    pub c_in: usize,
    pub c_out: usize,
}

impl CausalConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((kernel * c_in) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::uniform([kernel * c_in, c_out], bound, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([c_out])),
            geometry: ConvGeometry::causal(kernel, stride, dilation),
            c_in,
            c_out,
        }
    }

    pub fn left_padding(&self) -> isize {
        self.geometry.left_pad
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv1d(x, w, Some(b), self.geometry)
    }
}

fn dims4<T: Real>(tape: &Tape<'_, T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    let s = tape.shape(x);
    s.try_into()
        .map_err(|_| invalid(op, format!("expected [B, T, J, C], got {s:?}")))
}

/// `[T/2, T]` matrix averaging adjacent frame pairs.
pub fn pair_average_matrix<T: Real>(frames: usize) -> Tensor<T> {
    let half = frames / 2;
    let mut m = Tensor::zeros([half, frames]);
    for i in 0..half {
        m.data_mut()[i * frames + 2 * i] = T::of(0.5);
        m.data_mut()[i * frames + 2 * i + 1] = T::of(0.5);
    }
    m
}

/// Averages frame pairs; odd lengths are rejected.
pub fn temporal_pool<T: Real>(tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    let [b, t, j, c] = dims4(tape, x, "temporal_pool")?;
    if t % 2 != 0 {
        return Err(Error::IndivisibleLength { len: t, factor: 2 });
    }
    let y = tape.mix(x, Arc::new(pair_average_matrix(t)), b)?;
    tape.reshape(y, [b, t / 2, j, c])
}

/// Doubles the length by linear interpolation.
pub fn temporal_unpool<T: Real>(tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    let [b, t, j, c] = dims4(tape, x, "temporal_unpool")?;
    let y = tape.mix(x, Arc::new(interpolation_matrix(t)), b)?;
    tape.reshape(y, [b, 2 * t, j, c])
}

/// Averages the members of each group.
pub fn skeletal_pool<T: Real>(tape: &mut Tape<'_, T>, x: Var, level: &PoolingLevel) -> Result<Var> {
    let [b, t, j, c] = dims4(tape, x, "skeletal_pool")?;
    let y = tape.mix(x, Arc::new(pool_matrix(level, j)), b * t)?;
    tape.reshape(y, [b, t, level.groups.len(), c])
}

/// Copies each pooled joint's feature to every member of its group.
pub fn skeletal_unpool<T: Real>(tape: &mut Tape<'_, T>, x: Var, level: &PoolingLevel, joints: usize) -> Result<Var> {
    let [b, t, g, c] = dims4(tape, x, "skeletal_unpool")?;
    if g != level.groups.len() {
        return Err(invalid(
            "skeletal_unpool",
            format!("level has {} groups, input has {g} joints", level.groups.len()),
        ));
    }
    let y = tape.mix(x, Arc::new(unpool_matrix(level, joints)), b * t)?;
    tape.reshape(y, [b, t, joints, c])
}
