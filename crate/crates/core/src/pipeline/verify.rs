//! Self-checks run by `verify`: each returns a pass flag and a short detail.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use crate::csvae::{vae_loss, CausalConv, CsVae, SkeletalConv, VaeConfig, VaeLossWeights};
use crate::denoiser::{AdaLn, Attention};
use crate::error::Result;
use crate::eval::fid;
use crate::moe::{dynamic_select, ExpertBiasState, MoeConfig, MoeLayer, MoeMode, SynergisticRouter};
use crate::motion::{MotionSequence, SkeletonTopology};
use crate::numerics::{causal_padding, param_gradient_check, ConvGeometry, ParamStore, Tape, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn randn(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()).expect("shape")
}

fn run(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every check in order.
pub fn run_all() -> Vec<Check> {
    vec![
        run("gating_oracle", gating_oracle),
        run("padding_formula", padding_formula),
        run("causality", causality),
        run("bias_convergence", bias_convergence),
        run("gradients", gradients),
        run("fid_identity", fid_identity),
        run("flatten_round_trip", flatten_round_trip),
        run("file_format_round_trip", file_round_trip),
    ]
}

/// Dynamic selection plus layer dispatch against a per-token loop over experts.
fn gating_oracle() -> Result<(bool, String)> {
    let mut r = rng::seeded(0x6A7E);
    let mut worst = 0.0f64;
    let mut worst_sum = 0.0f64;
    for i in 0..50 {
        let n = r.random_range(1..=8);
        let b = r.random_range(1..=4);
        let seg = r.random_range(1..=16);
        let (d, dt) = (6, 5);
        let cfg = MoeConfig {
            mode: MoeMode::Dts,
            n_experts: n,
            ..MoeConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let mut layer = MoeLayer::new(&mut store, "m", &cfg, d, dt, &mut rng::stream(0x6A7E, i))?;
        for v in layer.bias.bias.iter_mut() {
            *v = -r.random_range(0.05..0.95);
        }
        let pool = randn(&[b * seg, d], &mut r);
        let text = randn(&[b, dt], &mut r);
        let mut tape = Tape::bind(&store, false);
        let p = tape.constant(pool.clone());
        let t = tape.constant(text);
        let out = layer.forward(&mut tape, p, t, b)?;
        let dec = out.decision.expect("routed layer");
        let logits = Tensor::new([b * seg, n], dec.logits.clone())?;
        let again = dynamic_select(&logits, &layer.bias.bias, 1)?;
        let expert_out: Vec<Tensor<f64>> = layer
            .experts
            .iter()
            .map(|e| {
                let y = e.forward(&mut tape, p)?;
                Ok(tape.value(y).clone())
            })
            .collect::<Result<_>>()?;
        let y = tape.value(out.output);
        for s in 0..b * seg {
            let mut sum_a = 0.0;
            for e in 0..n {
                sum_a += again.probs[s * n + e];
            }
            worst_sum = worst_sum.max((sum_a - 1.0).abs());
            for c in 0..d {
                let mut acc = 0.0;
                for e in 0..n {
                    let m = 1.0 / (1.0 + (-dec.logits[s * n + e]).exp()) + layer.bias.bias[e];
                    if m > 0.0 {
                        acc += again.probs[s * n + e] * expert_out[e].data()[s * d + c];
                    }
                }
                worst = worst.max((acc - y.data()[s * d + c]).abs());
            }
        }
    }
    Ok((worst < 1e-6 && worst_sum < 1e-6, format!("max |y − oracle| {worst:.2e}, max |ΣA − 1| {worst_sum:.2e}")))
}

fn padding_formula() -> Result<(bool, String)> {
    let mut ok = true;
    let mut cases = 0;
    for k in 1..=5usize {
        for s in 1..=3usize {
            for d in 1..=3usize {
                cases += 1;
                let g = ConvGeometry::causal(k, s, d);
                let pad = (k as isize - 1) * d as isize + 1 - s as isize;
                ok &= g.left_pad == pad && causal_padding(k, s, d) == pad;
                for t in 1..=12usize {
                    // Padded length t + pad, window span (k−1)d+1, stride s.
                    let span = ((k - 1) * d + 1) as isize;
                    let padded = t as isize + pad;
                    let expect = if padded < span { 0 } else { ((padded - span) / s as isize + 1) as usize };
                    ok &= g.output_len(t) == expect;
                }
            }
        }
    }
    Ok((ok, format!("{cases} (k, s, d) combinations")))
}

fn causality() -> Result<(bool, String)> {
    let mut r = rng::seeded(0xCA05);
    let mut ok = true;
    for i in 0..30u64 {
        let layers = r.random_range(1..=3);
        let mut store = ParamStore::<f64>::new();
        let convs: Vec<CausalConv> = (0..layers)
            .map(|l| {
                let (k, s, d) = (r.random_range(1..=4), r.random_range(1..=2), r.random_range(1..=2));
                CausalConv::new(&mut store, &format!("c{l}"), 2, 2, k, s, d, &mut rng::stream(0xCA05, i * 8 + l as u64))
            })
            .collect();
        let frames = 24;
        let x = randn(&[1, frames, 1, 2], &mut r);
        let cut = r.random_range(0..frames);
        let mut x2 = x.clone();
        x2.data_mut()[(cut + 1) * 2..].iter_mut().for_each(|v| *v = 0.0);
        let eval = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut tape = Tape::bind(&store, false);
            let mut h = tape.constant(x.clone());
            for c in &convs {
                h = c.forward(&mut tape, h)?;
            }
            Ok(tape.value(h).clone())
        };
        let (ya, yb) = (eval(&x)?, eval(&x2)?);
        // Last input frame each output depends on, composed through the stack.
        let t_out = ya.shape()[1];
        for t in 0..t_out {
            let mut last = t as isize;
            for c in convs.iter().rev() {
                if last < 0 {
                    break;
                }
                last = c.geometry.last_input_frame(last as usize);
            }
            if last <= cut as isize {
                ok &= ya.data()[t * 2..t * 2 + 2] == yb.data()[t * 2..t * 2 + 2];
            }
        }
    }
    let mut store = ParamStore::<f64>::new();
    let vae = CsVae::new(&mut store, VaeConfig::default(), SkeletonTopology::toy(), &mut rng::seeded(3))?;
    let frames = 32;
    let x = randn(&[1, frames, 9, 12], &mut r);
    let factor = vae.downsample_factor();
    let w = vae.latent_width();
    for cut in [3usize, 10, 17, 27] {
        let mut x2 = x.clone();
        x2.data_mut()[(cut + 1) * 9 * 12..].iter_mut().for_each(|v| *v = 0.0);
        let (za, zb) = (vae.encode_mean(&store, &x)?, vae.encode_mean(&store, &x2)?);
        for t in 0..frames / factor {
            if t * factor + factor - 1 <= cut {
                ok &= za.data()[t * w..(t + 1) * w] == zb.data()[t * w..(t + 1) * w];
            }
        }
    }
    Ok((ok, "30 random stacks and the VAE encoder".into()))
}

fn bias_convergence() -> Result<(bool, String)> {
    let (n, s) = (8, 240);
    let mut r = rng::seeded(0xB1A5);
    let logits = Tensor::<f64>::new([s, n], (0..s * n).map(|_| r.random_range(-3.0..3.0)).collect())?;
    let mut state = ExpertBiasState::new(n, -0.5, 1e-4);
    let expected = 30.0;
    let steps = 20_000;
    let mut tail = vec![0.0; n];
    for step in 0..steps {
        let dec = dynamic_select(&logits, &state.bias, 1)?;
        let counts = dec.selection_counts();
        if step >= steps - 1000 {
            tail.iter_mut().zip(&counts).for_each(|(t, c)| *t += c / 1000.0);
        }
        state.update(&counts, expected)?;
    }
    let worst = tail.iter().map(|c| (c - expected).abs()).fold(0.0, f64::max);
    Ok((worst <= 3.0, format!("max |mean K_select − 30| = {worst:.3}")))
}

fn probe(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let w = randn(tape.shape(y), &mut rng::seeded(seed));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn gradients() -> Result<(bool, String)> {
    let mut r = rng::seeded(0x96AD);
    let mut errs: Vec<(&str, f64)> = Vec::new();
    let topo = SkeletonTopology::toy();

    let mut store = ParamStore::<f64>::new();
    let adj: Vec<Vec<usize>> = (0..9).map(|j| topo.neighbors(j).to_vec()).collect();
    let skel = SkeletalConv::new(&mut store, "s", adj, 3, 2, &mut r);
    let conv = CausalConv::new(&mut store, "c", 3, 2, 3, 2, 2, &mut r);
    let x = randn(&[2, 7, 9, 3], &mut r);
    let e = param_gradient_check(&store, |t| { let v = t.constant(x.clone()); let y = skel.forward(t, v)?; probe(t, y, 1) }, 1e-5, None)?;
    errs.push(("skeletal_conv", e));
    let e = param_gradient_check(&store, |t| { let v = t.constant(x.clone()); let y = conv.forward(t, v)?; probe(t, y, 2) }, 1e-5, None)?;
    errs.push(("causal_conv", e));

    let mut store = ParamStore::<f64>::new();
    let router = SynergisticRouter::new(&mut store, "r", 6, 5, 4, 0.5, &mut r)?;
    let pool = randn(&[8, 6], &mut r);
    let text = randn(&[2, 5], &mut r);
    let e = param_gradient_check(&store, |t| {
        let p = t.constant(pool.clone());
        let tx = t.constant(text.clone());
        let y = router.route(t, p, tx, 4)?.combined;
        probe(t, y, 3)
    }, 1e-5, None)?;
    errs.push(("router", e));

    for mode in MoeMode::ALL {
        let cfg = MoeConfig { mode, n_experts: 4, ..MoeConfig::default() };
        let mut store = ParamStore::<f64>::new();
        let layer = MoeLayer::new(&mut store, "m", &cfg, 6, 5, &mut rng::stream(0x96AD, 1))?;
        // Resample until every selection score is clear of the threshold.
        let (pool, text) = loop {
            let pool = randn(&[8, 6], &mut r);
            let text = randn(&[2, 5], &mut r);
            let mut tape = Tape::bind(&store, false);
            let p = tape.constant(pool.clone());
            let t = tape.constant(text.clone());
            let dec = layer.forward(&mut tape, p, t, 2)?.decision;
            let safe = dec.and_then(|d| d.scores).is_none_or(|m| m.iter().all(|v| v.abs() > 1e-3));
            if safe {
                break (pool, text);
            }
        };
        let mut with_pool = store.clone();
        let pid = with_pool.add("pool", pool);
        let e = param_gradient_check(&with_pool, |t| {
            let p = t.param(pid);
            let tx = t.constant(text.clone());
            let y = layer.forward(t, p, tx, 2)?.output;
            probe(t, y, 4)
        }, 1e-5, None)?;
        errs.push((mode.name(), e));
    }

    let mut store = ParamStore::<f64>::new();
    let attn = Attention::new(&mut store, "a", 8, 2, &mut r);
    let norm = AdaLn::new(&mut store, "n", 4, 8);
    for t in store.tensors_mut() {
        let noise = randn(t.shape(), &mut r);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.3 * n;
        }
    }
    let x = randn(&[6, 8], &mut r);
    let src = randn(&[6, 8], &mut r);
    let cond = randn(&[2, 4], &mut r);
    let e = param_gradient_check(&store, |t| {
        let xv = t.constant(x.clone());
        let sv = t.constant(src.clone());
        let y = attn.forward(t, xv, sv, 2)?;
        probe(t, y, 5)
    }, 1e-5, None)?;
    errs.push(("attention", e));
    let e = param_gradient_check(&store, |t| {
        let xv = t.constant(x.clone());
        let c = t.constant(cond.clone());
        let y = norm.forward(t, xv, c, 3)?;
        probe(t, y, 6)
    }, 1e-5, None)?;
    errs.push(("adaln", e));

    let mut store = ParamStore::<f64>::new();
    let vcfg = VaeConfig { channels: 4, latent_dim: 3, ..VaeConfig::default() };
    let vae = CsVae::new(&mut store, vcfg, topo, &mut r)?;
    let x = randn(&[1, 8, 9, 12], &mut r);
    let noise = randn(&[1, 2, 4, 3], &mut r);
    let recon = {
        let mut tape = Tape::bind(&store, false);
        let xv = tape.constant(x.clone());
        let en = vae.encode(&mut tape, xv, Some(&noise))?;
        let y = vae.decode(&mut tape, en.z)?;
        tape.value(y).clone()
    };
    // Targets sit at least 0.05 from the reconstruction, clear of the L1 kink.
    let shift = randn(recon.shape(), &mut r).map(|v| v.signum() * (0.05 + 0.2 * v.abs()));
    let target = Tensor::new(recon.shape().to_vec(), recon.data().iter().zip(shift.data()).map(|(a, b)| a + b).collect())?;
    let e = param_gradient_check(&store, |t| {
        let xv = t.constant(x.clone());
        let tv = t.constant(target.clone());
        let en = vae.encode(t, xv, Some(&noise))?;
        let y = vae.decode(t, en.z)?;
        Ok(vae_loss(t, y, tv, en.mean, en.logvar, &VaeLossWeights::default())?.total)
    }, 1e-5, None)?;
    errs.push(("vae_loss", e));

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok((worst < 1e-4, detail))
}

fn fid_identity() -> Result<(bool, String)> {
    let mut r = rng::seeded(0xF1D);
    let x: Vec<Vec<f64>> = (0..200).map(|_| (0..8).map(|_| r.sample(StandardNormal)).collect()).collect();
    let v = fid(&x, &x)?;
    Ok((v.abs() < 1e-6, format!("FID(X, X) = {v:.2e}")))
}

fn flatten_round_trip() -> Result<(bool, String)> {
    let mut r = rng::seeded(0xF1A7);
    let mut ok = true;
    for (t, j) in [(1, 5), (7, 9), (32, 24)] {
        let m = MotionSequence::new(t, j, (0..t * j * 12).map(|_| r.random::<f32>()).collect())?;
        let flat = m.flatten_joints();
        ok &= flat.shape() == [t, j * 12] && MotionSequence::unflatten(&flat, j)? == m;
    }
    Ok((ok, "three shapes".into()))
}

fn file_round_trip() -> Result<(bool, String)> {
    let mut r = rng::seeded(0xF11E);
    let m = MotionSequence::new(5, 9, (0..5 * 9 * 12).map(|_| r.random::<f32>() - 0.5).collect())?;
    let bytes = m.to_bytes();
    let mut ok = MotionSequence::from_bytes(&bytes)? == m && bytes.len() == 16 + 5 * 9 * 12 * 4;
    ok &= MotionSequence::from_bytes(&bytes[..bytes.len() - 1]).is_err();

    let mut store = ParamStore::<f32>::new();
    store.add("w", Tensor::randn([3, 4], 1.0, &mut r));
    store.add("b", Tensor::randn([4], 1.0, &mut r));
    let path = std::env::temp_dir().join(format!("intermoe-verify-{}.ckpt", std::process::id()));
    save_checkpoint(&path, "probe", "hash", serde_json::json!({}), serde_json::json!({}), &store)?;
    let back = load_checkpoint::<f32>(&path, "probe");
    let _ = std::fs::remove_file(&path);
    let back = back?;
    ok &= back.tensors.len() == 2 && back.tensors.iter().zip(store.tensors()).all(|((_, a), b)| a == b);
    Ok((ok, ".mot bytes and checkpoint".into()))
}
