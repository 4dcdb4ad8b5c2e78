//! Synergistic routing and the mixture-of-experts block with dynamic
//! temporal selection, plus token-choice, expert-choice and dense baselines.

mod config;
mod gating;
mod layer;
mod router;
mod telemetry;

pub use config::{MoeConfig, MoeMode, RoutingScope};
pub use gating::{
    dynamic_select, expert_choice_select, token_choice_select, ExpertBiasState, GatingDecision, BIAS_MARGIN,
    MASKED_LOGIT,
};
pub use layer::{dispatch, MoeLayer, MoeOutput};
pub use router::{combine_logits, RouterLogits, SynergisticRouter};
pub use telemetry::{read_telemetry, telemetry_rows, TelemetryRow, TelemetryWriter};

#[cfg(test)]
mod tests;
