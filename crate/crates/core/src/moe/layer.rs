use rand::Rng;

use super::config::{MoeConfig, MoeMode, RoutingScope};
use super::gating::{dynamic_select, expert_choice_select, token_choice_select, ExpertBiasState, GatingDecision, MASKED_LOGIT};
use super::router::SynergisticRouter;
use crate::error::{invalid, Result};
use crate::numerics::nn::Mlp;
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::Real;

/// Routed expert block over a flattened `[S, D]` token pool.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub cfg: MoeConfig,
    pub model_dim: usize,
    pub router: Option<SynergisticRouter>,
    pub experts: Vec<Mlp>,
    pub dense: Option<Mlp>,
    pub bias: ExpertBiasState,
}

pub struct MoeOutput<T> {
    pub output: Var,
    pub decision: Option<GatingDecision<T>>,
}

impl MoeLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &MoeConfig,
        model_dim: usize,
        text_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let bias = ExpertBiasState::new(cfg.n_experts, cfg.bias_init, cfg.bias_step);
        if cfg.mode == MoeMode::Dense {
            let dense = Mlp::new(store, &format!("{name}.dense"), (model_dim, 4 * model_dim, model_dim), rng);
            return Ok(Self { cfg: cfg.clone(), model_dim, router: None, experts: vec![], dense: Some(dense), bias });
        }
        let router = SynergisticRouter::new(store, &format!("{name}.router"), model_dim, text_dim, cfg.n_experts, cfg.alpha, rng)?;
        let hidden = cfg.hidden_mult * model_dim;
        let experts = (0..cfg.n_experts)
            .map(|e| Mlp::new(store, &format!("{name}.expert{e}"), (model_dim, hidden, model_dim), rng))
            .collect();
        Ok(Self { cfg: cfg.clone(), model_dim, router: Some(router), experts, dense: None, bias })
    }

    /// Pools the routing operates over for a batch of `batches` samples.
    pub fn segments(&self, batches: usize) -> usize {
        match self.cfg.scope {
            RoutingScope::BatchLevel => 1,
            RoutingScope::InstanceLevel => batches.max(1),
        }
    }

    /// `K_exp` for a decision, per routing pool.
    pub fn expected_load<T: Real>(&self, decision: &GatingDecision<T>) -> f64 {
        self.cfg.expected_load(decision.tokens / decision.segments)
    }

    /// `pool` is `[B·T', D]`, `text` is `[B, D_t]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, pool: Var, text: Var, batches: usize) -> Result<MoeOutput<T>> {
        let s = match tape.shape(pool) {
            [s, d] if *d == self.model_dim => *s,
            other => return Err(invalid("moe_forward", format!("pool shape {other:?}, model width {}", self.model_dim))),
        };
        if batches == 0 || s % batches != 0 {
            return Err(invalid("moe_forward", format!("{s} tokens do not split into {batches} samples")));
        }
        if let Some(dense) = &self.dense {
            let output = dense.forward(tape, pool)?;
            return Ok(MoeOutput { output, decision: None });
        }
        let router = self.router.as_ref().expect("routed mode has a router");
        let logits = router.route(tape, pool, text, s / batches)?.combined;
        let segments = self.segments(batches);
        let values = tape.value(logits).clone();
        let (decision, gate_source) = match self.cfg.mode {
            MoeMode::Dts => (dynamic_select(&values, &self.bias.bias, segments)?, logits),
            MoeMode::ExpertChoice => {
                let cap = self.cfg.expert_capacity(s / segments);
                (expert_choice_select(&values, cap, segments)?, logits)
            }
            MoeMode::TokenChoice => {
                let d = token_choice_select(&values, self.cfg.token_choice_k())?;
                let offsets = selection_offsets::<T>(&d);
                (d, tape.add_const(logits, &offsets)?)
            }
            MoeMode::Dense => unreachable!(),
        };
        let gates = tape.softmax(gate_source)?;
        let output = dispatch(tape, pool, gates, &decision, &self.experts)?;
        Ok(MoeOutput { output, decision: Some(decision) })
    }

    /// Applies the sign rule after a training step.
    pub fn update_bias<T: Real>(&mut self, decision: &GatingDecision<T>) -> Result<()> {
        let expected = self.expected_load(decision);
        self.bias.count_and_update(decision, expected)
    }
}

/// Adds `MASKED_LOGIT` to every unselected (token, expert) pair.
fn selection_offsets<T: Real>(d: &GatingDecision<T>) -> Tensor<T> {
    let mut off = vec![T::of(MASKED_LOGIT); d.tokens * d.experts];
    for (e, sel) in d.selected.iter().enumerate() {
        for &s in sel {
            off[s * d.experts + e] = T::zero();
        }
    }
    Tensor::new([d.tokens, d.experts], off).expect("offset shape")
}

/// Gather each expert's tokens, evaluate, weight by the gate and scatter back.
/// Experts are reduced in index order so the sum is deterministic.
pub fn dispatch<T: Real>(
    tape: &mut Tape<'_, T>,
    pool: Var,
    gates: Var,
    decision: &GatingDecision<T>,
    experts: &[Mlp],
) -> Result<Var> {
    let [s, d] = *tape.shape(pool) else {
        return Err(invalid("dispatch", "pool must be rank 2"));
    };
    if experts.len() != decision.experts || decision.tokens != s {
        return Err(invalid(
            "dispatch",
            format!("{} experts / {} tokens vs decision {}x{}", experts.len(), s, decision.experts, decision.tokens),
        ));
    }
    let mut acc: Option<Var> = None;
    for (e, (expert, sel)) in experts.iter().zip(&decision.selected).enumerate() {
        if sel.is_empty() {
            continue;
        }
        let x = tape.gather_rows(pool, sel)?;
        let y = expert.forward(tape, x)?;
        let idx: Vec<(usize, usize)> = sel.iter().map(|&t| (t, e)).collect();
        let g = tape.take_entries(gates, &idx)?;
        let y = tape.mul_col(y, g)?;
        let y = tape.scatter_add_rows(y, sel, s)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => tape.constant(Tensor::zeros([s, d])),
    })
}
