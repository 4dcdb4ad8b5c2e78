use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::config::MoeMode;
use crate::error::{invalid, Error, Result};
use crate::numerics::{sigmoid, softmax_rows, Tensor};
use crate::Real;

/// Routing outcome for one pool. Matrices are `[S, N]` (token-major).
#[derive(Clone, Debug, PartialEq)]
pub struct GatingDecision<T> {
    pub mode: MoeMode,
    pub tokens: usize,
    pub experts: usize,
    /// Number of equal-length pools the tokens were split into.
    pub segments: usize,
    /// Combined logits.
    pub logits: Vec<T>,
    /// Per-token softmax over experts.
    pub probs: Vec<T>,
    /// `sigmoid(R) + b_e`; only for dynamic selection.
    pub scores: Option<Vec<T>>,
    /// Final gates.
    pub gates: Vec<T>,
    /// Token indices each expert processes, ascending.
    pub selected: Vec<Vec<usize>>,
}

impl<T: Real> GatingDecision<T> {
    pub fn gate(&self, s: usize, e: usize) -> T {
        self.gates[s * self.experts + e]
    }

    /// `K_select` per expert, averaged over segments.
    pub fn selection_counts(&self) -> Vec<f64> {
        self.selected
            .iter()
            .map(|s| s.len() as f64 / self.segments as f64)
            .collect()
    }

    /// Number of experts processing each token.
    pub fn experts_per_token(&self) -> Vec<usize> {
        let mut c = vec![0; self.tokens];
        for sel in &self.selected {
            for &s in sel {
                c[s] += 1;
            }
        }
        c
    }

    pub fn dropped_tokens(&self) -> usize {
        self.experts_per_token().iter().filter(|&&c| c == 0).count()
    }
}

fn dims<T: Real>(logits: &Tensor<T>) -> Result<(usize, usize)> {
    logits.dims2()
}

fn selected_from_mask(mask: &[bool], s: usize, n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|e| (0..s).filter(|&t| mask[t * n + e]).collect())
        .collect()
}

/// Dynamic temporal selection: `G = A` where `sigmoid(R) + b_e > 0`, else 0.
pub fn dynamic_select<T: Real>(logits: &Tensor<T>, bias: &[f64], segments: usize) -> Result<GatingDecision<T>> {
    let (s, n) = dims(logits)?;
    if bias.len() != n {
        return Err(invalid("dynamic_select", format!("{} biases for {n} experts", bias.len())));
    }
    let r = logits.data();
    let probs = softmax_rows(r, n);
    let scores: Vec<T> = r
        .iter()
        .enumerate()
        .map(|(i, &x)| sigmoid(x) + T::of(bias[i % n]))
        .collect();
    let mask: Vec<bool> = scores.iter().map(|&m| m > T::zero()).collect();
    let gates = probs
        .iter()
        .zip(&mask)
        .map(|(&a, &keep)| if keep { a } else { T::zero() })
        .collect();
    Ok(GatingDecision {
        mode: MoeMode::Dts,
        tokens: s,
        experts: n,
        segments: segments.max(1),
        logits: r.to_vec(),
        probs,
        scores: Some(scores),
        gates,
        selected: selected_from_mask(&mask, s, n),
    })
}

/// Descending by value, ties broken by lower index.
fn ranked<T: Real>(values: impl Iterator<Item = T>) -> Vec<usize> {
    let v: Vec<T> = values.collect();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Each token keeps its `top_k` experts, gates renormalized over that set.
pub fn token_choice_select<T: Real>(logits: &Tensor<T>, top_k: usize) -> Result<GatingDecision<T>> {
    let (s, n) = dims(logits)?;
    if top_k == 0 || top_k > n {
        return Err(invalid("token_choice", format!("top_k {top_k} outside 1..={n}")));
    }
    let r = logits.data();
    let probs = softmax_rows(r, n);
    let mut mask = vec![false; s * n];
    for t in 0..s {
        for &e in ranked(r[t * n..(t + 1) * n].iter().copied()).iter().take(top_k) {
            mask[t * n + e] = true;
        }
    }
    let masked: Vec<T> = r
        .iter()
        .zip(&mask)
        .map(|(&x, &keep)| if keep { x } else { T::of(MASKED_LOGIT) + x })
        .collect();
    let gates = softmax_rows(&masked, n)
        .into_iter()
        .zip(&mask)
        .map(|(g, &keep)| if keep { g } else { T::zero() })
        .collect();
    Ok(GatingDecision {
        mode: MoeMode::TokenChoice,
        tokens: s,
        experts: n,
        segments: 1,
        logits: r.to_vec(),
        probs,
        scores: None,
        gates,
        selected: selected_from_mask(&mask, s, n),
    })
}

/// Offset that removes a logit from a softmax without producing infinities.
pub const MASKED_LOGIT: f64 = -1e30;

/// Each expert takes its `capacity` highest-logit tokens within every segment.
pub fn expert_choice_select<T: Real>(logits: &Tensor<T>, capacity: usize, segments: usize) -> Result<GatingDecision<T>> {
    let (s, n) = dims(logits)?;
    let segments = segments.max(1);
    if s % segments != 0 {
        return Err(invalid("expert_choice", format!("{s} tokens do not split into {segments} pools")));
    }
    let seg = s / segments;
    if capacity == 0 || capacity > seg {
        return Err(invalid("expert_choice", format!("capacity {capacity} outside 1..={seg}")));
    }
    let r = logits.data();
    let probs = softmax_rows(r, n);
    let mut mask = vec![false; s * n];
    for p in 0..segments {
        for e in 0..n {
            let col = (0..seg).map(|t| r[(p * seg + t) * n + e]);
            for &t in ranked(col).iter().take(capacity) {
                mask[(p * seg + t) * n + e] = true;
            }
        }
    }
    let gates = probs
        .iter()
        .zip(&mask)
        .map(|(&a, &keep)| if keep { a } else { T::zero() })
        .collect();
    Ok(GatingDecision {
        mode: MoeMode::ExpertChoice,
        tokens: s,
        experts: n,
        segments,
        logits: r.to_vec(),
        probs,
        scores: None,
        gates,
        selected: selected_from_mask(&mask, s, n),
    })
}

/// Learnable per-expert thresholds, moved by a sign rule toward the expected load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertBiasState {
    pub bias: Vec<f64>,
    pub step: f64,
    pub frozen: bool,
    pub last_counts: Vec<f64>,
    pub last_expected: f64,
    pub updates: u64,
}

pub const BIAS_MARGIN: f64 = 1e-6;

impl ExpertBiasState {
    pub fn new(n_experts: usize, init: f64, step: f64) -> Self {
        Self {
            bias: vec![init.clamp(-1.0 + BIAS_MARGIN, -BIAS_MARGIN); n_experts],
            step,
            frozen: false,
            last_counts: vec![0.0; n_experts],
            last_expected: 0.0,
            updates: 0,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// `b_e ← clamp(b_e − σ·sign(K_select − K_exp))`.
    pub fn update(&mut self, counts: &[f64], expected: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::BiasFrozen);
        }
        if counts.len() != self.bias.len() {
            return Err(invalid("bias_update", format!("{} counts for {} experts", counts.len(), self.bias.len())));
        }
        for (b, &k) in self.bias.iter_mut().zip(counts) {
            let diff = k - expected;
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            *b = (*b - self.step * sign).clamp(-1.0 + BIAS_MARGIN, -BIAS_MARGIN);
        }
        self.last_counts = counts.to_vec();
        self.last_expected = expected;
        self.updates += 1;
        Ok(())
    }

    /// Counts selections in `decision` and updates; `expected` is per segment.
    pub fn count_and_update<T: Real>(&mut self, decision: &GatingDecision<T>, expected: f64) -> Result<()> {
        self.update(&decision.selection_counts(), expected)
    }
}
