use std::fs::{self, File};
use std::io::BufWriter;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::stages::{fit_denoiser, generate, latent_pairs, Corpus, DenoiserArch, LoadedDenoiser, LoadedVae, RunPaths};
use crate::error::{Error, Result};
use crate::eval::{evaluate, extract, metric_rows, write_metric_rows, EvalReport, FeatureExtractor, MetricRow, PairedMotion, METRICS};
use crate::moe::MoeMode;
use crate::{Precision, Real};

/// One routing configuration of an ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub mode: MoeMode,
    pub n_experts: usize,
    pub c_exp: f64,
}

impl GridPoint {
    pub fn name(&self) -> String {
        format!("{}_e{}_c{}", self.mode.name(), self.n_experts, self.c_exp)
    }
}

/// The default grid: every mode, every expert count and every capacity
/// factor, each varied alone around `base`; duplicates removed.
pub fn default_grid(base: GridPoint) -> Vec<GridPoint> {
    let mut out: Vec<GridPoint> = Vec::new();
    let mut push = |p: GridPoint| {
        if !out.contains(&p) {
            out.push(p);
        }
    };
    for mode in MoeMode::ALL {
        push(GridPoint { mode, ..base });
    }
    for n_experts in [4, 8, 16] {
        push(GridPoint { n_experts, ..base });
    }
    for c_exp in [0.8, 1.0, 2.0] {
        push(GridPoint { c_exp, ..base });
    }
    out
}

/// Parses `axis=v1,v2,...` specs into the cartesian product over the named
/// axes (`mode`, `experts`, `c_exp`); unnamed axes stay at `base`.
pub fn parse_grid<S: AsRef<str>>(specs: &[S], base: GridPoint) -> Result<Vec<GridPoint>> {
    if specs.is_empty() {
        return Ok(default_grid(base));
    }
    let mut modes = vec![base.mode];
    let mut experts = vec![base.n_experts];
    let mut caps = vec![base.c_exp];
    for spec in specs {
        let spec = spec.as_ref();
        let (axis, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid spec {spec:?} is not axis=v1,v2")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis {axis:?} has no values")));
        }
        let bad = |v: &str| Error::Config(format!("bad value {v:?} for grid axis {axis:?}"));
        match axis.trim() {
            "mode" | "modes" => {
                modes = values
                    .iter()
                    .map(|v| MoeMode::parse(v).map_err(|_| bad(v)))
                    .collect::<Result<_>>()?
            }
            "experts" | "n_experts" => {
                experts = values
                    .iter()
                    .map(|v| v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| bad(v)))
                    .collect::<Result<_>>()?
            }
            "c_exp" => {
                caps = values
                    .iter()
                    .map(|v| v.parse::<f64>().ok().filter(|&c| c > 0.0).ok_or_else(|| bad(v)))
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::Config(format!("unknown grid axis {other:?}"))),
        }
    }
    let mut out = Vec::new();
    for &mode in &modes {
        for &n_experts in &experts {
            for &c_exp in &caps {
                out.push(GridPoint { mode, n_experts, c_exp });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointResult {
    pub point: GridPoint,
    pub report: EvalReport,
    pub final_loss: f64,
    pub mean_selection_total: f64,
}

/// DTS against expert choice at matched expert count and capacity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub n_experts: usize,
    pub c_exp: f64,
    pub dts_fid: f64,
    pub expert_choice_fid: f64,
    /// Full width of the DTS interval, `ci95_high − ci95_low`.
    pub dts_ci95_width: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub points: Vec<PointResult>,
    /// Modes sorted by FID (best first) at the base expert count and capacity.
    pub mode_ordering: Vec<(String, f64)>,
    pub comparisons: Vec<ModeComparison>,
}

impl AblationOutcome {
    pub fn passed(&self) -> bool {
        self.comparisons.iter().all(|c| c.passed)
    }
}

/// Header of the wide summary table.
pub fn summary_header() -> Vec<String> {
    let mut h: Vec<String> = ["point", "mode", "n_experts", "c_exp", "final_loss", "mean_selection_total"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for m in METRICS {
        h.extend([format!("{m}_mean"), format!("{m}_ci95_low"), format!("{m}_ci95_high")]);
    }
    h
}

pub fn run_ablation(cfg: &RunConfig, paths: &RunPaths, points: &[GridPoint]) -> Result<AblationOutcome> {
    match cfg.precision {
        Precision::F32 => run_impl::<f32>(cfg, paths, points),
        Precision::F64 => run_impl::<f64>(cfg, paths, points),
    }
}

fn run_impl<T: Real>(cfg: &RunConfig, paths: &RunPaths, points: &[GridPoint]) -> Result<AblationOutcome> {
    if points.is_empty() {
        return Err(Error::Config("empty ablation grid".into()));
    }
    let corpus = Corpus::load(paths)?;
    let vae = LoadedVae::<T>::load(paths)?;
    let dir = paths.ablation();
    fs::create_dir_all(&dir)?;
    let data = latent_pairs(&vae, &corpus.train, &corpus.manifest.normalizer)?;
    let real: Vec<PairedMotion> = corpus.heldout.iter().map(PairedMotion::from).collect();
    let prompts: Vec<&[u32]> = real.iter().map(|p| p.tokens.as_slice()).collect();
    let ex = FeatureExtractor::new(cfg.eval.feature_seed, corpus.joints(), cfg.eval.feature_width)?;
    let real_f = extract(&ex, &real)?;
    let a = &cfg.ablation;
    let train = crate::denoiser::DenoiserTrainConfig {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        warmup: a.warmup,
        ..cfg.denoiser_train.clone()
    };

    let mut results = Vec::with_capacity(points.len());
    let mut long: Vec<MetricRow> = Vec::new();
    for p in points {
        let name = p.name();
        info!("ablation point {name}");
        let pdir = dir.join(&name);
        fs::create_dir_all(&pdir)?;
        let mut den_cfg = cfg.denoiser.clone();
        den_cfg.dim = a.dim;
        den_cfg.heads = a.heads;
        den_cfg.blocks = a.blocks;
        den_cfg.text_dim = a.dim;
        den_cfg.moe.mode = p.mode;
        den_cfg.moe.n_experts = p.n_experts;
        den_cfg.moe.c_exp = p.c_exp;
        den_cfg.moe.validate().map_err(|e| Error::Config(e.to_string()))?;
        let arch = DenoiserArch {
            denoiser: den_cfg,
            diffusion: cfg.diffusion.clone(),
            latent_width: vae.vae.latent_width(),
            seg_len: vae.seg_len()?,
        };
        // Every point trains from the same seed so only the routing differs.
        let (store, model, log) = fit_denoiser::<T>(
            &arch,
            &train,
            &data,
            cfg.seed,
            &pdir.join("denoiser_loss.csv"),
            &pdir.join("routing.csv"),
        )?;
        let den = LoadedDenoiser {
            store,
            model,
            schedule: crate::denoiser::NoiseSchedule::new(&arch.diffusion)?,
            arch,
            config_hash: cfg.hash(),
        };
        let (motions, sel) = generate(
            &den,
            &vae,
            &corpus.manifest.normalizer,
            &cfg.sampler,
            &prompts,
            cfg.sample_batch,
            cfg.seed,
        )?;
        let gen: Vec<PairedMotion> = motions
            .into_iter()
            .zip(&prompts)
            .map(|((a, b), t)| PairedMotion { a, b, tokens: t.to_vec() })
            .collect();
        let report = evaluate(&cfg.eval, &extract(&ex, &gen)?, &real_f, cfg.seed)?;
        let rows = metric_rows(&name, p.mode.name(), &report);
        write_metric_rows(File::create(pdir.join("metrics.csv"))?, &rows)?;
        long.extend(rows);
        let tail = log.len().min(100).max(1);
        let final_loss = log[log.len().saturating_sub(tail)..].iter().map(|r| r.loss).sum::<f64>() / tail as f64;
        info!("{name}: fid {:.4}", report.get("fid").mean);
        results.push(PointResult {
            point: *p,
            report,
            final_loss,
            mean_selection_total: sel.mean(),
        });
    }
    write_metric_rows(File::create(dir.join("metrics.csv"))?, &long)?;

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("summary.csv"))?));
    w.write_record(summary_header())?;
    for r in &results {
        let mut rec = vec![
            r.point.name(),
            r.point.mode.name().to_string(),
            r.point.n_experts.to_string(),
            r.point.c_exp.to_string(),
            r.final_loss.to_string(),
            r.mean_selection_total.to_string(),
        ];
        for m in METRICS {
            let s = r.report.get(m);
            rec.extend([s.mean.to_string(), s.low().to_string(), s.high().to_string()]);
        }
        w.write_record(rec)?;
    }
    w.flush()?;

    let base = (cfg.denoiser.moe.n_experts, cfg.denoiser.moe.c_exp);
    let mut mode_ordering: Vec<(String, f64)> = results
        .iter()
        .filter(|r| (r.point.n_experts, r.point.c_exp) == base)
        .map(|r| (r.point.mode.name().to_string(), r.report.get("fid").mean))
        .collect();
    mode_ordering.sort_by(|a, b| a.1.total_cmp(&b.1));

    let mut comparisons = Vec::new();
    for d in results.iter().filter(|r| r.point.mode == MoeMode::Dts) {
        let ec = results.iter().find(|r| {
            r.point.mode == MoeMode::ExpertChoice && r.point.n_experts == d.point.n_experts && r.point.c_exp == d.point.c_exp
        });
        if let Some(ec) = ec {
            let dts = d.report.get("fid");
            let width = dts.high() - dts.low();
            let ec_fid = ec.report.get("fid").mean;
            comparisons.push(ModeComparison {
                n_experts: d.point.n_experts,
                c_exp: d.point.c_exp,
                dts_fid: dts.mean,
                expert_choice_fid: ec_fid,
                dts_ci95_width: width,
                passed: dts.mean - ec_fid <= width,
            });
        }
    }
    let outcome = AblationOutcome {
        points: results,
        mode_ordering,
        comparisons,
    };
    let mut text = serde_json::to_string_pretty(&serde_json::json!({
        "config_hash": cfg.hash(),
        "mode_ordering": outcome.mode_ordering,
        "comparisons": outcome.comparisons,
        "passed": outcome.passed(),
    }))?;
    text.push('\n');
    fs::write(dir.join("ordering.json"), text)?;
    Ok(outcome)
}
