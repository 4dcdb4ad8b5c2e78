//! Toy evaluation suite: a frozen random-projection feature extractor and
//! the FID / R-Precision / MM-Dist / Diversity / MultiModality metrics.

mod features;
mod metrics;
mod protocol;

pub use features::{FeatureExtractor, FEATURE_WIDTH};
pub use metrics::{diversity, fid, mm_dist, multimodality, paired_distance, r_precision, RPrecision, Summary};
pub use protocol::{
    evaluate, extract, metric_rows, read_metric_rows, write_metric_rows, EffectiveSizes, EvalConfig, EvalReport,
    FeatureSet, MetricRow, PairedMotion, METRICS,
};

#[cfg(test)]
mod tests;
