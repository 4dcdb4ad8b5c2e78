use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{skeletal_pool, skeletal_unpool, temporal_pool, temporal_unpool, CausalConv, SkeletalConv};
use crate::error::{invalid, Error, Result};
use crate::motion::{level_adjacency, SkeletonTopology, FEATURE_DIM};
use crate::numerics::nn::Linear;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub channels: usize,
    pub latent_dim: usize,
    pub levels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            latent_dim: 32,
            levels: 2,
            kernel: 3,
            dilation: 1,
        }
    }
}

/// Two skeletal convs then two causal convs, each residual with SiLU.
#[derive(Clone, Debug)]
struct Stage {
    skel: [SkeletalConv; 2],
    temporal: [CausalConv; 2],
}

impl Stage {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        adjacency: Vec<Vec<usize>>,
        cfg: &VaeConfig,
        rng: &mut R,
    ) -> Self {
        let c = cfg.channels;
        let skel = [0, 1].map(|i| SkeletalConv::new(store, &format!("{name}.skel{i}"), adjacency.clone(), c, c, rng));
        let temporal =
            [0, 1].map(|i| CausalConv::new(store, &format!("{name}.tconv{i}"), c, c, cfg.kernel, 1, cfg.dilation, rng));
        Self { skel, temporal }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, mut x: Var) -> Result<Var> {
        for s in &self.skel {
            let h = s.forward(tape, x)?;
            let h = tape.silu(h)?;
            x = tape.add(x, h)?;
        }
        for c in &self.temporal {
            let h = c.forward(tape, x)?;
            let h = tape.silu(h)?;
            x = tape.add(x, h)?;
        }
        Ok(x)
    }
}

/// Per-joint channel gain and offset on `[B, T, J, C]`. Convolution weights
/// are shared across joints, so this is what lets symmetric joints (left and
/// right leg) carry distinct, even opposite, signals through pooling.
#[derive(Clone, Debug)]
struct JointAffine {
    gain: ParamId,
    bias: ParamId,
}

impl JointAffine {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut R) -> Self {
        let mut gain = Tensor::randn([width], 0.5, rng);
        gain.data_mut().iter_mut().for_each(|g| *g += T::one());
        Self {
            gain: store.add(format!("{name}.gain"), gain),
            bias: store.add(format!("{name}.bias"), Tensor::randn([width], 0.1, rng)),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        let flat = tape.reshape(h, [shape[0] * shape[1], shape[2] * shape[3]])?;
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        let y = tape.mul_row(flat, g)?;
        let y = tape.add_bias(y, b)?;
        tape.reshape(y, shape)
    }
}

/// Encoder statistics and the sampled latent, all `[B, T', J', D_z]`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub mean: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Hierarchical causal-skeletal VAE over single-person clips.
#[derive(Clone, Debug)]
pub struct CsVae {
    cfg: VaeConfig,
    topology: SkeletonTopology,
    input: Linear,
    /// Joint identity at the start of each encoder level.
    enc_in: Vec<JointAffine>,
    /// Joint identity right before each skeletal pool.
    enc_out: Vec<JointAffine>,
    enc: Vec<Stage>,
    mean_head: Linear,
    logvar_head: Linear,
    latent_in: Linear,
    /// Joint identity re-injected at each decoder level, coarsest first.
    dec_id: Vec<JointAffine>,
    dec: Vec<Stage>,
    output: Linear,
}

impl CsVae {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: VaeConfig,
        topology: SkeletonTopology,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.levels == 0 || cfg.channels == 0 || cfg.latent_dim == 0 || cfg.kernel == 0 || cfg.dilation == 0 {
            return Err(invalid("vae", format!("degenerate config {cfg:?}")));
        }
        let max_levels = topology.pooling().len() + 1;
        if cfg.levels > max_levels {
            return Err(invalid(
                "vae",
                format!("{} levels need {} pooling levels in the rig", cfg.levels, cfg.levels - 1),
            ));
        }
        let c = cfg.channels;
        let input = Linear::new(store, "vae.enc.input", FEATURE_DIM, c, true, rng);
        let sizes = topology.level_sizes();
        let enc_in = (0..cfg.levels)
            .map(|l| JointAffine::new(store, &format!("vae.enc.level{l}.joint_in"), sizes[l] * c, rng))
            .collect();
        let enc_out = (0..cfg.levels - 1)
            .map(|l| JointAffine::new(store, &format!("vae.enc.level{l}.joint_out"), sizes[l] * c, rng))
            .collect();
        let enc = (0..cfg.levels)
            .map(|l| Stage::new(store, &format!("vae.enc.level{l}"), level_adjacency(&topology, l), &cfg, rng))
            .collect();
        let mean_head = Linear::new(store, "vae.enc.mean", c, cfg.latent_dim, true, rng);
        let logvar_head = Linear::zeros(store, "vae.enc.logvar", c, cfg.latent_dim);
        let latent_in = Linear::new(store, "vae.dec.input", cfg.latent_dim, c, true, rng);
        let dec_id = (0..cfg.levels)
            .rev()
            .map(|l| JointAffine::new(store, &format!("vae.dec.level{l}.joint_in"), sizes[l] * c, rng))
            .collect();
        let dec = (0..cfg.levels)
            .rev()
            .map(|l| Stage::new(store, &format!("vae.dec.level{l}"), level_adjacency(&topology, l), &cfg, rng))
            .collect();
        let output = Linear::new(store, "vae.dec.output", c, FEATURE_DIM, true, rng);
        Ok(Self {
            cfg,
            topology,
            input,
            enc_in,
            enc_out,
            enc,
            mean_head,
            logvar_head,
            latent_in,
            dec_id,
            dec,
            output,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topology
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.cfg.levels
    }

    pub fn latent_joints(&self) -> usize {
        self.topology.level_sizes()[self.cfg.levels - 1]
    }

    /// Width of one flattened latent frame, `J'·D_z`.
    pub fn latent_width(&self) -> usize {
        self.latent_joints() * self.cfg.latent_dim
    }

    pub fn latent_frames(&self, frames: usize) -> Result<usize> {
        let f = self.downsample_factor();
        if frames == 0 || frames % f != 0 {
            return Err(Error::IndivisibleLength { len: frames, factor: f });
        }
        Ok(frames / f)
    }

    /// Encoder trunk on `[B, T, J, 12]`, returning mean and log-variance.
    pub fn encode_stats<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        let j = self.topology.joint_count();
        if shape.len() != 4 || shape[2] != j || shape[3] != FEATURE_DIM {
            return Err(invalid(
                "vae.encode",
                format!("expected [B, T, {j}, {FEATURE_DIM}], got {shape:?}"),
            ));
        }
        self.latent_frames(shape[1])?;
        let mut h = self.input.forward(tape, x)?;
        for (l, stage) in self.enc.iter().enumerate() {
            h = self.enc_in[l].forward(tape, h)?;
            h = stage.forward(tape, h)?;
            if l + 1 < self.cfg.levels {
                h = self.enc_out[l].forward(tape, h)?;
                h = skeletal_pool(tape, h, &self.topology.pooling()[l])?;
            }
            h = temporal_pool(tape, h)?;
        }
        let mean = self.mean_head.forward(tape, h)?;
        let logvar = self.logvar_head.forward(tape, h)?;
        Ok((mean, logvar))
    }

    /// Reparameterized encoding; `noise = None` is the deterministic mode (z = mean).
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, noise: Option<&Tensor<T>>) -> Result<Encoded> {
        let (mean, logvar) = self.encode_stats(tape, x)?;
        let z = match noise {
            None => mean,
            Some(eps) => {
                let half = tape.scale(logvar, T::of(0.5))?;
                let std = tape.exp(half)?;
                let e = tape.constant(eps.clone());
                let spread = tape.mul(std, e)?;
                tape.add(mean, spread)?
            }
        };
        Ok(Encoded { mean, logvar, z })
    }

    /// `[B, T', J', D_z]` → `[B, T, J, 12]`.
    pub fn decode<T: Real>(&self, tape: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 4 || shape[2] != self.latent_joints() || shape[3] != self.cfg.latent_dim {
            return Err(invalid(
                "vae.decode",
                format!(
                    "expected [B, T', {}, {}], got {shape:?}",
                    self.latent_joints(),
                    self.cfg.latent_dim
                ),
            ));
        }
        let mut h = self.latent_in.forward(tape, z)?;
        for (i, stage) in self.dec.iter().enumerate() {
            let l = self.cfg.levels - 1 - i;
            h = temporal_unpool(tape, h)?;
            if l + 1 < self.cfg.levels {
                let joints = self.topology.level_sizes()[l];
                h = skeletal_unpool(tape, h, &self.topology.pooling()[l], joints)?;
            }
            h = self.dec_id[i].forward(tape, h)?;
            h = stage.forward(tape, h)?;
        }
        self.output.forward(tape, h)
    }

    /// Deterministic latent means for a batch of normalized clips `[B, T, J, 12]`.
    pub fn encode_mean<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::bind(store, false);
        let xv = tape.constant(x.clone());
        let (mean, _) = self.encode_stats(&mut tape, xv)?;
        Ok(tape.value(mean).clone())
    }

    pub fn decode_value<T: Real>(&self, store: &ParamStore<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::bind(store, false);
        let zv = tape.constant(z.clone());
        let y = self.decode(&mut tape, zv)?;
        Ok(tape.value(y).clone())
    }
}
