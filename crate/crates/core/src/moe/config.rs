use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeMode {
    /// Sigmoid-plus-bias threshold per (expert, token).
    #[serde(alias = "dynamic_temporal_selection")]
    Dts,
    TokenChoice,
    ExpertChoice,
    /// One FFN of width 4·D instead of experts.
    Dense,
}

impl MoeMode {
    pub const ALL: [MoeMode; 4] = [MoeMode::Dense, MoeMode::TokenChoice, MoeMode::ExpertChoice, MoeMode::Dts];

    pub fn name(self) -> &'static str {
        match self {
            MoeMode::Dts => "dts",
            MoeMode::TokenChoice => "token_choice",
            MoeMode::ExpertChoice => "expert_choice",
            MoeMode::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .or((s == "dynamic_temporal_selection").then_some(MoeMode::Dts))
            .ok_or_else(|| invalid("moe", format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingScope {
    /// One pool of every token in the batch.
    BatchLevel,
    /// Each sample's tokens form their own pool.
    InstanceLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeConfig {
    pub mode: MoeMode,
    pub n_experts: usize,
    /// Blend of motion and text logits.
    pub alpha: f64,
    /// Expected experts per token.
    pub c_exp: f64,
    /// Token-choice fan-out; defaults to `round(c_exp)`.
    pub top_k: Option<usize>,
    pub scope: RoutingScope,
    /// Expert hidden width as a multiple of the model width.
    pub hidden_mult: usize,
    pub bias_step: f64,
    pub bias_init: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            mode: MoeMode::Dts,
            n_experts: 8,
            alpha: 0.5,
            c_exp: 1.0,
            top_k: None,
            scope: RoutingScope::BatchLevel,
            hidden_mult: 2,
            bias_step: 1e-4,
            bias_init: -0.5,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("moe", format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.n_experts == 0 && self.mode != MoeMode::Dense {
            return Err(invalid("moe", "need at least one expert"));
        }
        if !(self.c_exp > 0.0) {
            return Err(invalid("moe", format!("c_exp must be positive, got {}", self.c_exp)));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > self.n_experts {
                return Err(invalid("moe", format!("top_k {k} outside 1..={}", self.n_experts)));
            }
        }
        if !(-1.0 < self.bias_init && self.bias_init < 0.0) {
            return Err(invalid("moe", format!("bias_init {} outside (-1, 0)", self.bias_init)));
        }
        Ok(())
    }

    /// `K_exp = C_exp · S / N` for a pool of `pool` tokens.
    pub fn expected_load(&self, pool: usize) -> f64 {
        self.c_exp * pool as f64 / self.n_experts as f64
    }

    pub fn token_choice_k(&self) -> usize {
        self.top_k
            .unwrap_or_else(|| (self.c_exp.round() as usize).max(1))
            .min(self.n_experts)
    }

    /// Tokens each expert takes in expert-choice mode.
    pub fn expert_capacity(&self, pool: usize) -> usize {
        (self.expected_load(pool).round() as usize).clamp(1, pool.max(1))
    }
}
