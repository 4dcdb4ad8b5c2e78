use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureExtractor, FEATURE_WIDTH};
use super::metrics::{diversity, fid, mm_dist, multimodality, r_precision, Summary};
use crate::error::{Error, Result};
use crate::motion::{InteractionSample, MotionSequence};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub diversity_subset: usize,
    pub multimodality_subset: usize,
    pub r_pool: usize,
    pub repeats: usize,
    pub feature_width: usize,
    pub feature_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            diversity_subset: 300,
            multimodality_subset: 100,
            r_pool: 32,
            repeats: 20,
            feature_width: FEATURE_WIDTH,
            feature_seed: 0xFEA7,
        }
    }
}

/// Subset sizes after scaling down to the available samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveSizes {
    pub diversity_subset: usize,
    pub multimodality_subset: usize,
    pub multimodality_conditions: usize,
    pub r_pool: usize,
}

/// One interaction with its prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedMotion {
    pub a: MotionSequence,
    pub b: MotionSequence,
    pub tokens: Vec<u32>,
}

impl From<&InteractionSample> for PairedMotion {
    fn from(s: &InteractionSample) -> Self {
        Self {
            a: s.motion_a.clone(),
            b: s.motion_b.clone(),
            tokens: s.text.tokens.clone(),
        }
    }
}

pub const METRICS: [&str; 7] = ["fid", "r_precision_top1", "r_precision_top2", "r_precision_top3", "mm_dist", "diversity", "multimodality"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by the names in `METRICS`.
    pub metrics: BTreeMap<String, Summary>,
    pub sizes: EffectiveSizes,
    pub generated: usize,
    pub reference: usize,
}

impl EvalReport {
    pub fn get(&self, metric: &str) -> Summary {
        self.metrics[metric]
    }
}

pub struct FeatureSet {
    pub motion: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
    pub tokens: Vec<Vec<u32>>,
}

pub fn extract(ex: &FeatureExtractor, pairs: &[PairedMotion]) -> Result<FeatureSet> {
    let mut out = FeatureSet { motion: vec![], text: vec![], tokens: vec![] };
    for p in pairs {
        out.motion.push(ex.motion_features(&p.a, &p.b)?);
        out.text.push(ex.text_features(&p.tokens)?);
        out.tokens.push(p.tokens.clone());
    }
    Ok(out)
}

/// Runs the metric suite `repeats` times. FID and MM-Dist resample the
/// generated set with replacement per repeat; the retrieval pools and the
/// diversity subsets are redrawn from per-repeat seeds.
pub fn evaluate(cfg: &EvalConfig, gen: &FeatureSet, real: &FeatureSet, seed: u64) -> Result<EvalReport> {
    let n = gen.motion.len();
    if n < cfg.r_pool.max(2) {
        return Err(Error::InsufficientSamples { what: "generated interactions", needed: cfg.r_pool.max(2), have: n });
    }
    let mut groups: BTreeMap<&[u32], Vec<Vec<f64>>> = BTreeMap::new();
    for (t, m) in gen.tokens.iter().zip(&gen.motion) {
        groups.entry(t.as_slice()).or_default().push(m.clone());
    }
    let groups: Vec<Vec<Vec<f64>>> = groups.into_values().filter(|g| g.len() >= 2).collect();
    let smallest = groups.iter().map(Vec::len).min().unwrap_or(0);
    let sizes = EffectiveSizes {
        diversity_subset: cfg.diversity_subset.min(n),
        multimodality_subset: cfg.multimodality_subset.min(smallest),
        multimodality_conditions: groups.len(),
        r_pool: cfg.r_pool,
    };
    let mut values: BTreeMap<&str, Vec<f64>> = METRICS.iter().map(|&m| (m, vec![])).collect();
    for rep in 0..cfg.repeats.max(1) {
        let s = rng::stream(seed, rep as u64).random::<u64>();
        let mut r = rng::stream(s, 0xB0);
        let boot: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
        let motion: Vec<Vec<f64>> = boot.iter().map(|&i| gen.motion[i].clone()).collect();
        let text: Vec<Vec<f64>> = boot.iter().map(|&i| gen.text[i].clone()).collect();
        values.get_mut("fid").unwrap().push(fid(&motion, &real.motion)?);
        values.get_mut("mm_dist").unwrap().push(mm_dist(&motion, &text)?);
        let rp = r_precision(&gen.motion, &gen.text, cfg.r_pool, s)?;
        values.get_mut("r_precision_top1").unwrap().push(rp.top1);
        values.get_mut("r_precision_top2").unwrap().push(rp.top2);
        values.get_mut("r_precision_top3").unwrap().push(rp.top3);
        values.get_mut("diversity").unwrap().push(diversity(&gen.motion, sizes.diversity_subset, s)?);
        let mm = if sizes.multimodality_subset == 0 {
            0.0
        } else {
            multimodality(&groups, sizes.multimodality_subset, s)?
        };
        values.get_mut("multimodality").unwrap().push(mm);
    }
    Ok(EvalReport {
        metrics: values.into_iter().map(|(k, v)| (k.to_string(), Summary::of(&v))).collect(),
        sizes,
        generated: n,
        reference: real.motion.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub mode: String,
    pub metric: String,
    pub mean: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

pub fn metric_rows(run_id: &str, mode: &str, report: &EvalReport) -> Vec<MetricRow> {
    METRICS
        .iter()
        .map(|&m| {
            let s = report.get(m);
            MetricRow {
                run_id: run_id.to_string(),
                mode: mode.to_string(),
                metric: m.to_string(),
                mean: s.mean,
                ci95_low: s.low(),
                ci95_high: s.high(),
            }
        })
        .collect()
}

pub fn write_metric_rows<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metric_rows(path: &std::path::Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}
