use std::io::Write;

use serde::{Deserialize, Serialize};

use super::gating::{ExpertBiasState, GatingDecision};
use crate::error::Result;
use crate::Real;

/// One routing record per (step, block, expert).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub step: u64,
    pub block: usize,
    pub expert: usize,
    #[serde(rename = "K_select")]
    pub k_select: f64,
    #[serde(rename = "K_exp")]
    pub k_exp: f64,
    pub b_e: f64,
}

pub fn telemetry_rows<T: Real>(
    step: u64,
    block: usize,
    decision: &GatingDecision<T>,
    expected: f64,
    bias: &ExpertBiasState,
) -> Vec<TelemetryRow> {
    decision
        .selection_counts()
        .into_iter()
        .enumerate()
        .map(|(expert, k_select)| TelemetryRow {
            step,
            block,
            expert,
            k_select,
            k_exp: expected,
            b_e: bias.bias[expert],
        })
        .collect()
}

/// CSV sink with a fixed header.
pub struct TelemetryWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TelemetryWriter<W> {
    pub fn new(w: W) -> Self {
        Self {
            inner: csv::Writer::from_writer(w),
        }
    }

    pub fn write(&mut self, rows: &[TelemetryRow]) -> Result<()> {
        for r in rows {
            self.inner.serialize(r)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_telemetry(path: &std::path::Path) -> Result<Vec<TelemetryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}
