use rand::Rng;

use super::*;
use crate::numerics::nn::Mlp;
use crate::numerics::{param_gradient_check, ParamStore, Tape, Tensor};
use crate::rng;

fn dyadic(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-16i32..=16) as f64 / 8.0).collect()).unwrap()
}

fn randn(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, r)
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logits(s: usize, n: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64([s, n], data).unwrap()
}

fn router_store(d: usize, dt: usize, n: usize, seed: u64) -> (ParamStore<f64>, SynergisticRouter) {
    let mut r = rng::seeded(seed);
    let mut store = ParamStore::new();
    let router = SynergisticRouter::new(&mut store, "r", d, dt, n, 0.5, &mut r).unwrap();
    for t in store.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = dyadic(&shape, &mut r);
    }
    (store, router)
}

#[test]
fn zero_router_weights_give_zero_logits() {
    let mut r = rng::seeded(1);
    let mut store = ParamStore::<f64>::new();
    let router = SynergisticRouter::new(&mut store, "r", 6, 5, 4, 0.5, &mut r).unwrap();
    for t in store.tensors_mut() {
        *t = Tensor::zeros(t.shape().to_vec());
    }
    let mut tape = Tape::bind(&store, false);
    let pool = tape.constant(randn(&[32, 6], &mut r));
    let text = tape.constant(randn(&[4, 5], &mut r));
    let out = router.route(&mut tape, pool, text, 8).unwrap();
    assert_eq!(tape.shape(out.motion), &[32, 4]);
    assert!(tape.value(out.combined).data().iter().all(|&v| v == 0.0));
    // Zero embedding with zero bias is also zero regardless of weights.
    let (store, router) = router_store(6, 5, 4, 2);
    let mut tape = Tape::bind(&store, false);
    let text = tape.constant(Tensor::zeros([3, 5]));
    let bias = store.get(router.text.bias.unwrap()).clone();
    let t = router.route_text(&mut tape, text, 2).unwrap();
    for row in 0..6 {
        assert_eq!(tape.value(t).row(row), bias.data());
    }
}

#[test]
fn router_logits_match_loop_oracle() {
    let (b, tp, d, dt, n) = (4, 8, 6, 5, 8);
    let (store, router) = router_store(d, dt, n, 3);
    let mut r = rng::seeded(4);
    let pool = dyadic(&[b * tp, d], &mut r);
    let mut text = dyadic(&[b, dt], &mut r);
    // Samples 1 and 2 share a prompt.
    let row1 = text.row(1).to_vec();
    text.data_mut()[2 * dt..3 * dt].copy_from_slice(&row1);
    let mut tape = Tape::bind(&store, false);
    let pv = tape.constant(pool.clone());
    let tv = tape.constant(text.clone());
    let out = router.route(&mut tape, pv, tv, tp).unwrap();
    let wm = store.get(router.motion.weight);
    let bm = store.get(router.motion.bias.unwrap());
    let wt = store.get(router.text.weight);
    let bt = store.get(router.text.bias.unwrap());
    for s in 0..b * tp {
        for e in 0..n {
            let mut m = bm.data()[e];
            for k in 0..d {
                m += pool.data()[s * d + k] * wm.data()[k * n + e];
            }
            let mut t = bt.data()[e];
            for k in 0..dt {
                t += text.data()[(s / tp) * dt + k] * wt.data()[k * n + e];
            }
            assert_eq!(tape.value(out.motion).data()[s * n + e], m);
            assert_eq!(tape.value(out.text).data()[s * n + e], t);
            assert_eq!(tape.value(out.combined).data()[s * n + e], 0.5 * m + 0.5 * t);
        }
    }
    for s in 0..tp {
        assert_eq!(tape.value(out.text).row(tp + s), tape.value(out.text).row(2 * tp + s));
    }
}

#[test]
fn combine_logits_blends() {
    let mut tape = Tape::<f64>::new();
    let m = tape.constant(Tensor::full([2, 3], 2.0));
    let t = tape.constant(Tensor::full([2, 3], 4.0));
    let c = combine_logits(&mut tape, m, t, 0.5).unwrap();
    assert!(tape.value(c).data().iter().all(|&v| v == 3.0));
    let c1 = combine_logits(&mut tape, m, t, 1.0).unwrap();
    assert_eq!(tape.value(c1), tape.value(m));
    let c0 = combine_logits(&mut tape, m, t, 0.0).unwrap();
    assert_eq!(tape.value(c0), tape.value(t));
    assert!(combine_logits(&mut tape, m, t, 1.5).is_err());
    assert!(combine_logits(&mut tape, m, t, -0.1).is_err());
    let mut store = ParamStore::<f64>::new();
    assert!(SynergisticRouter::new(&mut store, "r", 2, 2, 2, 2.0, &mut rng::seeded(0)).is_err());
}

#[test]
fn dynamic_select_threshold_examples() {
    let r = logits(1, 2, &[0.0, 0.0]);
    let d = dynamic_select(&r, &[-0.4, -0.4], 1).unwrap();
    let m = d.scores.as_ref().unwrap();
    assert!((m[0] - 0.1).abs() < 1e-12 && (m[1] - 0.1).abs() < 1e-12);
    assert_eq!(d.gates, vec![0.5, 0.5]);
    assert_eq!(d.selected, vec![vec![0], vec![0]]);

    let d = dynamic_select(&r, &[-0.6, -0.6], 1).unwrap();
    assert_eq!(d.gates, vec![0.0, 0.0]);
    assert_eq!(d.dropped_tokens(), 1);
    assert!(d.selected.iter().all(Vec::is_empty));

    // M = 0 exactly is not a selection.
    let d = dynamic_select(&r, &[-0.5, -0.25], 1).unwrap();
    assert_eq!(d.gates, vec![0.0, 0.5]);
}

#[test]
fn dynamic_select_matches_scalar_oracle() {
    let mut r = rng::seeded(7);
    for _ in 0..50 {
        let (s, n) = (16, 4);
        let l = randn(&[s, n], &mut r);
        let bias: Vec<f64> = (0..n).map(|_| r.random_range(-0.9..-0.1)).collect();
        let d = dynamic_select(&l, &bias, 1).unwrap();
        for t in 0..s {
            let row = &l.data()[t * n..(t + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let mut z = 0.0;
            for &v in &ex {
                z += v;
            }
            let mut sum_a = 0.0;
            for e in 0..n {
                let a = ex[e] / z;
                let m = sig(row[e]) + bias[e];
                let g = if m > 0.0 { a } else { 0.0 };
                assert_eq!(d.probs[t * n + e], a);
                assert_eq!(d.gate(t, e), g);
                assert_eq!(d.selected[e].contains(&t), m > 0.0);
                assert!(0.0 <= g && g <= a && a <= 1.0);
                sum_a += a;
            }
            assert!((sum_a - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn bias_sign_rule() {
    let mut st = ExpertBiasState::new(3, -0.5, 1e-4);
    st.update(&[10.0, 8.0, 6.0], 8.0).unwrap();
    assert!((st.bias[0] - (-0.5 - 1e-4)).abs() < 1e-15);
    assert_eq!(st.bias[1], -0.5);
    assert!((st.bias[2] - (-0.5 + 1e-4)).abs() < 1e-15);
    assert_eq!(st.last_counts, vec![10.0, 8.0, 6.0]);

    let cfg = MoeConfig::default();
    assert_eq!(cfg.expected_load(240), 30.0);

    // Clamped inside the open interval.
    let mut st = ExpertBiasState::new(2, -0.5, 0.3);
    for _ in 0..5 {
        st.update(&[100.0, 0.0], 1.0).unwrap();
    }
    assert_eq!(st.bias, vec![-1.0 + BIAS_MARGIN, -BIAS_MARGIN]);

    st.freeze();
    let err = st.update(&[1.0, 1.0], 1.0).unwrap_err();
    assert!(matches!(err, crate::Error::BiasFrozen));
    assert_eq!(st.bias, vec![-1.0 + BIAS_MARGIN, -BIAS_MARGIN]);
    assert!(st.update(&[1.0], 1.0).is_err() || st.frozen);
}

#[test]
fn selection_count_monotone_in_bias() {
    let mut r = rng::seeded(11);
    for _ in 0..20 {
        let l = randn(&[64, 4], &mut r);
        let mut prev = vec![-1.0f64; 4];
        let mut b = -0.99;
        while b < 0.0 {
            let d = dynamic_select(&l, &[b; 4], 1).unwrap();
            let counts = d.selection_counts();
            for (c, p) in counts.iter().zip(&prev) {
                assert!(c >= p);
            }
            prev = counts;
            b += 0.01;
        }
    }
}

#[test]
fn bias_converges_on_stationary_logits() {
    let (s, n) = (240, 8);
    let l = randn(&[s, n], &mut rng::seeded(5));
    let cfg = MoeConfig::default();
    let k_exp = cfg.expected_load(s);
    let mut st = ExpertBiasState::new(n, cfg.bias_init, cfg.bias_step);
    let mut tail = vec![0.0; n];
    let steps = 20_000;
    for step in 0..steps {
        let d = dynamic_select(&l, &st.bias, 1).unwrap();
        if step >= steps - 1000 {
            for (t, c) in tail.iter_mut().zip(d.selection_counts()) {
                *t += c / 1000.0;
            }
        }
        st.count_and_update(&d, k_exp).unwrap();
    }
    for t in tail {
        assert!((t - k_exp).abs() <= f64::max(1.0, 0.1 * k_exp), "{t}");
    }
}

#[test]
fn baseline_selection_rules() {
    let mut r = rng::seeded(9);
    let l = randn(&[12, 4], &mut r);
    let full = token_choice_select(&l, 4).unwrap();
    for (g, a) in full.gates.iter().zip(&full.probs) {
        assert!((g - a).abs() < 1e-12);
    }
    let one = token_choice_select(&l, 1).unwrap();
    assert!(one.experts_per_token().iter().all(|&c| c == 1));
    for t in 0..12 {
        let row = l.row(t);
        let arg = (0..4).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        assert_eq!(one.gate(t, arg), 1.0);
    }
    let all = expert_choice_select(&l, 12, 1).unwrap();
    assert!(all.selected.iter().all(|s| s.len() == 12));
    assert_eq!(all.gates, all.probs);
    let cap = expert_choice_select(&l, 3, 1).unwrap();
    assert!(cap.selected.iter().all(|s| s.len() == 3));
    for e in 0..4 {
        let worst_kept = cap.selected[e].iter().map(|&t| l.row(t)[e]).fold(f64::INFINITY, f64::min);
        for t in (0..12).filter(|t| !cap.selected[e].contains(t)) {
            assert!(l.row(t)[e] <= worst_kept);
        }
    }
    assert!(token_choice_select(&l, 5).is_err());
    assert!(expert_choice_select(&l, 13, 1).is_err());
    assert!(expert_choice_select(&l, 2, 5).is_err());
}

fn experts(store: &mut ParamStore<f64>, n: usize, d: usize, r: &mut impl Rng) -> Vec<Mlp> {
    (0..n).map(|e| Mlp::new(store, &format!("e{e}"), (d, 2 * d, d), r)).collect()
}

fn decision_from_gates(gates: Vec<f64>, s: usize, n: usize) -> GatingDecision<f64> {
    let selected = (0..n).map(|e| (0..s).filter(|&t| gates[t * n + e] != 0.0).collect()).collect();
    GatingDecision {
        mode: MoeMode::Dts,
        tokens: s,
        experts: n,
        segments: 1,
        logits: vec![0.0; s * n],
        probs: gates.clone(),
        scores: None,
        gates,
        selected,
    }
}

#[test]
fn dispatch_trivial_cases() {
    let mut r = rng::seeded(13);
    let (s, n, d) = (10, 3, 4);
    let mut store = ParamStore::new();
    let ex = experts(&mut store, n, d, &mut r);
    let pool = randn(&[s, d], &mut r);

    let zero = decision_from_gates(vec![0.0; s * n], s, n);
    let mut tape = Tape::bind(&store, false);
    let p = tape.constant(pool.clone());
    let g = tape.constant(Tensor::zeros([s, n]));
    let out = dispatch(&mut tape, p, g, &zero, &ex).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

    let single = decision_from_gates(vec![1.0; s], s, 1);
    let mut tape = Tape::bind(&store, false);
    let p = tape.constant(pool.clone());
    let g = tape.constant(Tensor::full([s, 1], 1.0));
    let out = dispatch(&mut tape, p, g, &single, &ex[..1]).unwrap();
    let plain = ex[0].forward(&mut tape, p).unwrap();
    assert!(tape.value(out).max_abs_diff(tape.value(plain)) < 1e-12);
}

#[test]
fn dispatch_matches_dense_oracle() {
    let mut r = rng::seeded(17);
    for (s, n) in [(8, 2), (16, 4), (33, 5), (64, 8)] {
        let d = 6;
        let mut store = ParamStore::new();
        let ex = experts(&mut store, n, d, &mut r);
        let pool = randn(&[s, d], &mut r);
        let l = randn(&[s, n], &mut r);
        let bias: Vec<f64> = (0..n).map(|_| r.random_range(-0.8..-0.2)).collect();
        let dec = dynamic_select(&l, &bias, 1).unwrap();
        let mut tape = Tape::bind(&store, false);
        let p = tape.constant(pool.clone());
        let lv = tape.constant(l.clone());
        let a = tape.softmax(lv).unwrap();
        let out = dispatch(&mut tape, p, a, &dec, &ex).unwrap();
        let full: Vec<Tensor<f64>> = ex.iter().map(|e| {
            let y = e.forward(&mut tape, p).unwrap();
            tape.value(y).clone()
        }).collect();
        let mut dense = vec![0.0; s * d];
        for t in 0..s {
            for e in 0..n {
                for k in 0..d {
                    dense[t * d + k] += dec.gate(t, e) * full[e].data()[t * d + k];
                }
            }
        }
        let dense = Tensor::new([s, d], dense).unwrap();
        assert!(tape.value(out).max_abs_diff(&dense) < 1e-6);
    }
}

fn layer_setup(mode: MoeMode, scope: RoutingScope, seed: u64) -> (ParamStore<f64>, MoeLayer) {
    let cfg = MoeConfig { mode, scope, n_experts: 4, ..MoeConfig::default() };
    let mut store = ParamStore::new();
    let layer = MoeLayer::new(&mut store, "moe", &cfg, 6, 5, &mut rng::seeded(seed)).unwrap();
    (store, layer)
}

#[test]
fn token_choice_full_fanout_is_soft_mixture() {
    let (store, mut layer) = layer_setup(MoeMode::TokenChoice, RoutingScope::BatchLevel, 19);
    layer.cfg.top_k = Some(4);
    let mut r = rng::seeded(20);
    let pool = randn(&[12, 6], &mut r);
    let text = randn(&[2, 5], &mut r);
    let mut tape = Tape::bind(&store, false);
    let p = tape.constant(pool);
    let t = tape.constant(text);
    let out = layer.forward(&mut tape, p, t, 2).unwrap();
    let dec = out.decision.unwrap();
    assert!(dec.selected.iter().all(|s| s.len() == 12));
    let logits = layer.router.as_ref().unwrap().route(&mut tape, p, t, 6).unwrap().combined;
    let a = tape.softmax(logits).unwrap();
    let soft = dispatch(&mut tape, p, a, &decision_from_gates(vec![1.0; 48], 12, 4), &layer.experts).unwrap();
    assert!(tape.value(out.output).max_abs_diff(tape.value(soft)) < 1e-12);
}

#[test]
fn instance_scope_with_one_sample_equals_batch_scope() {
    let mut r = rng::seeded(21);
    let pool = randn(&[16, 6], &mut r);
    let text = randn(&[1, 5], &mut r);
    for mode in [MoeMode::Dts, MoeMode::ExpertChoice, MoeMode::TokenChoice] {
        let (store, batch) = layer_setup(mode, RoutingScope::BatchLevel, 22);
        let (_, inst) = layer_setup(mode, RoutingScope::InstanceLevel, 22);
        let mut tape = Tape::bind(&store, false);
        let p = tape.constant(pool.clone());
        let t = tape.constant(text.clone());
        let a = batch.forward(&mut tape, p, t, 1).unwrap();
        let b = inst.forward(&mut tape, p, t, 1).unwrap();
        assert_eq!(a.decision, b.decision);
        assert_eq!(tape.value(a.output), tape.value(b.output));
        let da = a.decision.unwrap();
        assert_eq!(batch.expected_load(&da), inst.expected_load(&b.decision.unwrap()));
    }
}

#[test]
fn instance_scope_counts_per_sample() {
    let (store, layer) = layer_setup(MoeMode::ExpertChoice, RoutingScope::InstanceLevel, 23);
    let mut r = rng::seeded(24);
    let mut tape = Tape::bind(&store, false);
    let p = tape.constant(randn(&[24, 6], &mut r));
    let t = tape.constant(randn(&[3, 5], &mut r));
    let dec = layer.forward(&mut tape, p, t, 3).unwrap().decision.unwrap();
    assert_eq!(dec.segments, 3);
    // capacity = C_exp·8/4 = 2 per sample and per expert.
    for sel in &dec.selected {
        assert_eq!(sel.len(), 6);
        for seg in 0..3 {
            assert_eq!(sel.iter().filter(|&&t| t / 8 == seg).count(), 2);
        }
    }
    assert_eq!(dec.selection_counts(), vec![2.0; 4]);
    assert_eq!(layer.expected_load(&dec), 2.0);
}

#[test]
fn dropped_tokens_produce_zero_rows() {
    let (store, mut layer) = layer_setup(MoeMode::Dts, RoutingScope::BatchLevel, 25);
    layer.bias.bias = vec![-0.999; 4];
    let mut r = rng::seeded(26);
    let mut tape = Tape::bind(&store, false);
    let p = tape.constant(randn(&[8, 6], &mut r));
    let t = tape.constant(randn(&[2, 5], &mut r));
    let out = layer.forward(&mut tape, p, t, 2).unwrap();
    let dec = out.decision.unwrap();
    let per = dec.experts_per_token();
    for (s, &c) in per.iter().enumerate() {
        if c == 0 {
            assert!(tape.value(out.output).row(s).iter().all(|&v| v == 0.0));
        }
    }
    layer.bias.bias = vec![-0.001; 4];
    let out = layer.forward(&mut tape, p, t, 2).unwrap();
    assert_eq!(out.decision.unwrap().dropped_tokens(), 0);
    assert!(layer.forward(&mut tape, p, t, 3).is_err());
}

#[test]
fn update_bias_moves_toward_expected_load() {
    let (store, mut layer) = layer_setup(MoeMode::Dts, RoutingScope::BatchLevel, 27);
    let mut r = rng::seeded(28);
    let mut tape = Tape::bind(&store, false);
    let p = tape.constant(randn(&[16, 6], &mut r));
    let t = tape.constant(randn(&[2, 5], &mut r));
    let dec = layer.forward(&mut tape, p, t, 2).unwrap().decision.unwrap();
    let before = layer.bias.bias.clone();
    layer.update_bias(&dec).unwrap();
    for (e, c) in dec.selection_counts().iter().enumerate() {
        let delta = layer.bias.bias[e] - before[e];
        let expect = -1e-4 * (c - 4.0).signum() * f64::from(*c != 4.0);
        assert!((delta - expect).abs() < 1e-12);
    }
    layer.bias.freeze();
    assert!(layer.update_bias(&dec).is_err());
}

/// Finds an input whose selection scores all sit away from the threshold.
fn safe_pool(store: &ParamStore<f64>, layer: &MoeLayer, s: usize, b: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng::seeded(seed);
    loop {
        let pool = randn(&[s, 6], &mut r);
        let text = randn(&[b, 5], &mut r);
        let mut tape = Tape::bind(store, false);
        let p = tape.constant(pool.clone());
        let t = tape.constant(text.clone());
        let dec = layer.forward(&mut tape, p, t, b).unwrap().decision;
        let ok = match dec.as_ref().and_then(|d| d.scores.clone()) {
            Some(m) => m.iter().all(|v| v.abs() > 1e-3),
            None => true,
        };
        if ok {
            return (pool, text);
        }
    }
}

#[test]
fn moe_gradients_match_finite_differences() {
    for mode in MoeMode::ALL {
        let (store, layer) = layer_setup(mode, RoutingScope::BatchLevel, 29);
        let (pool, text) = safe_pool(&store, &layer, 8, 2, 30);
        let w = randn(&[8, 6], &mut rng::seeded(31));
        // The pool rides along as an extra parameter so the tape stays bound.
        let mut probe = store.clone();
        let pid = probe.add("pool", pool.clone());
        let f = |tape: &mut Tape<'_, f64>| -> crate::Result<crate::Var> {
            let p = tape.param(pid);
            let t = tape.constant(text.clone());
            let y = layer.forward(tape, p, t, 2)?.output;
            let y = tape.add_const(y, &w)?;
            let y = tape.square(y)?;
            tape.mean(y)
        };
        let err = param_gradient_check(&probe, f, 1e-5, None).unwrap();
        assert!(err < 1e-4, "{mode:?}: {err}");
    }
}

#[test]
fn telemetry_round_trip() {
    let l = logits(4, 2, &[1.0, -1.0, 0.5, 0.5, -2.0, 2.0, 0.0, 0.0]);
    let st = ExpertBiasState::new(2, -0.5, 1e-4);
    let d = dynamic_select(&l, &st.bias, 1).unwrap();
    let rows = telemetry_rows(7, 1, &d, 2.0, &st);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].k_select, d.selected[0].len() as f64);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("routing.csv");
    let mut w = TelemetryWriter::new(std::fs::File::create(&path).unwrap());
    w.write(&rows).unwrap();
    w.flush().unwrap();
    drop(w);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("step,block,expert,K_select,K_exp,b_e\n"));
    assert_eq!(read_telemetry(&path).unwrap(), rows);
}

#[test]
fn config_parsing_and_validation() {
    assert_eq!(MoeMode::parse("dynamic_temporal_selection").unwrap(), MoeMode::Dts);
    assert_eq!(MoeMode::parse("expert_choice").unwrap(), MoeMode::ExpertChoice);
    assert!(MoeMode::parse("switch").is_err());
    let cfg: MoeConfig = serde_json::from_str(r#"{"mode":"dynamic_temporal_selection"}"#).unwrap();
    assert_eq!(cfg, MoeConfig::default());
    assert!(MoeConfig { alpha: 2.0, ..MoeConfig::default() }.validate().is_err());
    assert!(MoeConfig { top_k: Some(9), ..MoeConfig::default() }.validate().is_err());
    assert_eq!(MoeConfig::default().expert_capacity(240), 30);
}
