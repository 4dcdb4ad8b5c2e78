use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::moe::{GatingDecision, MoeConfig, MoeLayer};
use crate::motion::TextEncoder;
use crate::numerics::nn::{Linear, Mlp};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::Real;

/// Where cross-attention reads the partner's features from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossSource {
    /// Partner hidden states entering the block.
    BlockInput,
    /// Partner hidden states after the block's self-attention.
    AfterSelfAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub text_dim: usize,
    pub cross_source: CrossSource,
    pub moe: MoeConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            heads: 4,
            blocks: 4,
            text_dim: 128,
            cross_source: CrossSource::BlockInput,
            // Bias step scaled with the desk learning rate so the biases keep
            // pace with router drift over a short run.
            moe: MoeConfig {
                bias_step: 1e-3,
                ..MoeConfig::default()
            },
        }
    }
}

const LN_EPS: f64 = 1e-5;

/// Multi-head attention with separate query and key/value sources.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        let mut lin = |n: &str| Linear::new(store, &format!("{name}.{n}"), dim, dim, true, rng);
        Self {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
            heads,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, source: Var, batches: usize) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, source)?;
        let v = self.v.forward(tape, source)?;
        let a = tape.attention(q, k, v, self.heads, batches)?;
        self.o.forward(tape, a)
    }
}

/// Layer norm whose scale and shift come from the conditioning vector.
/// Zero-initialized, so it starts as a plain layer norm.
#[derive(Clone, Debug)]
pub struct AdaLn {
    pub modulation: Linear,
    pub dim: usize,
}

impl AdaLn {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cond_dim: usize, dim: usize) -> Self {
        Self {
            modulation: Linear::zeros(store, &format!("{name}.modulation"), cond_dim, 2 * dim),
            dim,
        }
    }

    /// `x` is `[segments·seg_len, D]`, `cond` is `[segments, cond_dim]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, cond: Var, seg_len: usize) -> Result<Var> {
        let m = self.modulation.forward(tape, cond)?;
        let m = tape.repeat_rows(m, seg_len)?;
        let scale = tape.slice_cols(m, 0, self.dim)?;
        let shift = tape.slice_cols(m, self.dim, self.dim)?;
        let scale = tape.add_scalar(scale, T::one())?;
        let n = tape.layer_norm(x, T::of(LN_EPS))?;
        let y = tape.mul(n, scale)?;
        tape.add(y, shift)
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserBlock {
    pub norm_self: AdaLn,
    pub self_attn: Attention,
    pub norm_cross: AdaLn,
    pub cross_attn: Attention,
    pub norm_moe: AdaLn,
    pub moe: MoeLayer,
}

/// Exchanges the two persons' halves of a `[2·half, D]` stream.
fn partner<T: Real>(tape: &mut Tape<'_, T>, x: Var, half: usize) -> Result<Var> {
    let a = tape.slice_rows(x, 0, half)?;
    let b = tape.slice_rows(x, half, half)?;
    tape.concat_rows(&[b, a])
}

/// Shapes shared by every sub-layer of one forward call.
struct Layout {
    samples: usize,
    seg_len: usize,
}

impl Layout {
    fn segments(&self) -> usize {
        2 * self.samples
    }
    fn half(&self) -> usize {
        self.samples * self.seg_len
    }
}

impl DenoiserBlock {
    fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        cond: Var,
        text: Var,
        lay: &Layout,
        cross: CrossSource,
    ) -> Result<(Var, Option<GatingDecision<T>>)> {
        let segs = lay.segments();
        let h = self.norm_self.forward(tape, x, cond, lay.seg_len)?;
        let h = self.self_attn.forward(tape, h, h, segs)?;
        let x1 = tape.add(x, h)?;

        let h = self.norm_cross.forward(tape, x1, cond, lay.seg_len)?;
        let src = match cross {
            CrossSource::AfterSelfAttention => h,
            CrossSource::BlockInput => self.norm_cross.forward(tape, x, cond, lay.seg_len)?,
        };
        let src = partner(tape, src, lay.half())?;
        let h = self.cross_attn.forward(tape, h, src, segs)?;
        let x2 = tape.add(x1, h)?;

        let h = self.norm_moe.forward(tape, x2, cond, lay.seg_len)?;
        let out = self.moe.forward(tape, h, text, segs)?;
        Ok((tape.add(x2, out.output)?, out.decision))
    }
}

pub struct DenoiserOutput<T> {
    pub eps_a: Var,
    pub eps_b: Var,
    /// One entry per block; `None` for dense blocks.
    pub decisions: Vec<Option<GatingDecision<T>>>,
}

/// Two weight-shared transformer stacks denoising both persons at once; each
/// person's stream cross-attends to the other's.
#[derive(Clone, Debug)]
pub struct CooperativeDenoiser {
    pub cfg: DenoiserConfig,
    pub latent_width: usize,
    pub input: Linear,
    pub time_mlp: Mlp,
    pub text: TextEncoder,
    pub text_proj: Linear,
    pub null_text: ParamId,
    pub blocks: Vec<DenoiserBlock>,
    pub final_norm: AdaLn,
    pub output: Linear,
}

impl CooperativeDenoiser {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &DenoiserConfig,
        latent_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.dim;
        if d == 0 || cfg.heads == 0 || d % cfg.heads != 0 || d % 2 != 0 {
            return Err(invalid("denoiser", format!("width {d} must be even and divisible by {} heads", cfg.heads)));
        }
        if latent_width == 0 || cfg.text_dim == 0 {
            return Err(invalid("denoiser", "latent and text widths must be positive"));
        }
        let input = Linear::new(store, "den.input", latent_width, d, true, rng);
        let time_mlp = Mlp::new(store, "den.time", (d, d, d), rng);
        let text = TextEncoder::new(store, "den.text", cfg.text_dim, rng);
        let text_proj = Linear::new(store, "den.text_proj", cfg.text_dim, d, true, rng);
        let null_text = store.add("den.null_text", Tensor::randn([1, cfg.text_dim], 0.5, rng));
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let name = format!("den.block{i}");
            blocks.push(DenoiserBlock {
                norm_self: AdaLn::new(store, &format!("{name}.norm_self"), d, d),
                self_attn: Attention::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng),
                norm_cross: AdaLn::new(store, &format!("{name}.norm_cross"), d, d),
                cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d, cfg.heads, rng),
                norm_moe: AdaLn::new(store, &format!("{name}.norm_moe"), d, d),
                moe: MoeLayer::new(store, &format!("{name}.moe"), &cfg.moe, d, cfg.text_dim, rng)?,
            });
        }
        let final_norm = AdaLn::new(store, "den.final_norm", d, d);
        let output = Linear::new(store, "den.output", d, latent_width, true, rng);
        Ok(Self {
            cfg: cfg.clone(),
            latent_width,
            input,
            time_mlp,
            text,
            text_proj,
            null_text,
            blocks,
            final_norm,
            output,
        })
    }

    /// Text embeddings `[B, D_t]`; rows flagged in `drop` use the learned null embedding.
    pub fn text_embedding<T: Real>(&self, tape: &mut Tape<'_, T>, tokens: &[&[u32]], drop: &[bool]) -> Result<Var> {
        if drop.len() != tokens.len() {
            return Err(invalid("text_embedding", format!("{} drop flags for {} prompts", drop.len(), tokens.len())));
        }
        let b = tokens.len();
        if drop.iter().all(|&d| d) {
            return self.null_embedding(tape, b);
        }
        let enc = self.text.forward(tape, tokens)?;
        if drop.iter().all(|&d| !d) {
            return Ok(enc);
        }
        let keep: Vec<f64> = drop.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        let keep_t = tape.constant(Tensor::from_f64([b, 1], &keep)?);
        let null_t = tape.constant(Tensor::from_f64([b, 1], &keep.iter().map(|k| 1.0 - k).collect::<Vec<_>>())?);
        let enc = tape.mul_col(enc, keep_t)?;
        let null = self.null_embedding(tape, b)?;
        let null = tape.mul_col(null, null_t)?;
        tape.add(enc, null)
    }

    pub fn null_embedding<T: Real>(&self, tape: &mut Tape<'_, T>, samples: usize) -> Result<Var> {
        let n = tape.param(self.null_text);
        tape.repeat_rows(n, samples)
    }

    /// `z_a`, `z_b`: `[B·T', W]`; `t`: one timestep per sample; `text`: `[B, D_t]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        z_a: Var,
        z_b: Var,
        t: &[usize],
        text: Var,
    ) -> Result<DenoiserOutput<T>> {
        if tape.shape(z_a) != tape.shape(z_b) {
            return Err(shape_err("denoiser_forward", tape.shape(z_a), tape.shape(z_b)));
        }
        let b = t.len();
        let (rows, w) = match tape.shape(z_a) {
            [r, w] => (*r, *w),
            s => return Err(invalid("denoiser_forward", format!("latents must be [B·T', W], got {s:?}"))),
        };
        if w != self.latent_width || b == 0 || rows % b != 0 || rows == 0 {
            return Err(invalid(
                "denoiser_forward",
                format!("{rows}x{w} latents for {b} samples of width {}", self.latent_width),
            ));
        }
        if tape.shape(text) != [b, self.cfg.text_dim] {
            return Err(shape_err("denoiser_forward", tape.shape(text), &[b, self.cfg.text_dim]));
        }
        let lay = Layout {
            samples: b,
            seg_len: rows / b,
        };
        let d = self.cfg.dim;

        let temb = tape.constant(timestep_embedding(t, d));
        let temb = self.time_mlp.forward(tape, temb)?;
        let tproj = self.text_proj.forward(tape, text)?;
        let c = tape.add(temb, tproj)?;
        let c = tape.silu(c)?;
        let cond = tape.concat_rows(&[c, c])?;
        let text2 = tape.concat_rows(&[text, text])?;

        let z = tape.concat_rows(&[z_a, z_b])?;
        let x = self.input.forward(tape, z)?;
        let pos = Arc::new(positional_table::<T>(lay.seg_len, d));
        let mut x = tape.add_const(x, &tile_rows(&pos, lay.segments()))?;
        let mut decisions = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, dec) = block.forward(tape, x, cond, text2, &lay, self.cfg.cross_source)?;
            x = y;
            decisions.push(dec);
        }
        let h = self.final_norm.forward(tape, x, cond, lay.seg_len)?;
        let eps = self.output.forward(tape, h)?;
        let eps_a = tape.slice_rows(eps, 0, lay.half())?;
        let eps_b = tape.slice_rows(eps, lay.half(), lay.half())?;
        Ok(DenoiserOutput { eps_a, eps_b, decisions })
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &MoeLayer> {
        self.blocks.iter().map(|b| &b.moe)
    }

    pub fn moe_layers_mut(&mut self) -> impl Iterator<Item = &mut MoeLayer> {
        self.blocks.iter_mut().map(|b| &mut b.moe)
    }

    pub fn freeze_biases(&mut self) {
        for m in self.moe_layers_mut() {
            m.bias.freeze();
        }
    }

    /// Sign-rule update of every block's bias from its decision.
    pub fn update_biases<T: Real>(&mut self, decisions: &[Option<GatingDecision<T>>]) -> Result<()> {
        for (m, d) in self.moe_layers_mut().zip(decisions) {
            if let (Some(d), crate::moe::MoeMode::Dts) = (d, m.cfg.mode) {
                m.update_bias(d)?;
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer timesteps, `[t.len(), dim]`.
pub fn timestep_embedding<T: Real>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let row: Vec<f64> = (0..half)
            .map(|i| ti as f64 * (-(10_000f64).ln() * i as f64 / half as f64).exp())
            .collect();
        data.extend(row.iter().map(|a| T::of(a.sin())));
        data.extend(row.iter().map(|a| T::of(a.cos())));
        data.extend(std::iter::repeat(T::zero()).take(dim - 2 * half));
    }
    Tensor::new([t.len(), dim], data).expect("embedding shape")
}

/// Sinusoidal frame positions, `[frames, dim]`.
pub fn positional_table<T: Real>(frames: usize, dim: usize) -> Tensor<T> {
    let t: Vec<usize> = (0..frames).collect();
    timestep_embedding(&t, dim)
}

fn tile_rows<T: Real>(x: &Tensor<T>, times: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(x.numel() * times);
    for _ in 0..times {
        data.extend_from_slice(x.data());
    }
    let (r, c) = x.rows_cols();
    Tensor::new([r * times, c], data).expect("tile shape")
}
