use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use intermoe::moe::MoeMode;
use intermoe::pipeline::{self, GridPoint, RunConfig, RunPaths};
use intermoe::Error;

/// Environment variable naming the output root when `--out` is absent.
const OUT_ENV: &str = "INTERMOE_OUT";

#[derive(Parser)]
#[command(name = "intermoe", version, about = "Two-person motion generation with routed expert denoisers")]
struct Cli {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set denoiser.moe.n_experts=4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to $INTERMOE_OUT, then `./intermoe-out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its normalizer.
    GenCorpus,
    /// Train the causal-skeletal VAE.
    TrainVae,
    /// Train the cooperative denoiser on frozen VAE latents.
    TrainDenoiser,
    /// Sample one interaction per held-out prompt.
    Sample,
    /// Score samples against held-out motion.
    Eval,
    /// Train, sample and score reduced denoisers over a routing grid.
    Ablate {
        /// `mode=…`, `experts=…` or `c_exp=…`; several flags form a product.
        #[arg(long = "grid", value_name = "AXIS=V1,V2")]
        grid: Vec<String>,
    },
    /// Run the oracle, causality, convergence and gradient self-checks.
    Verify,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::MissingArtifact(_)) => 3,
        Some(Error::Verification(_)) => 4,
        Some(Error::IndivisibleLength { .. }) => 5,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<(RunConfig, RunPaths)> {
    let base = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut sets = cli.sets.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    let mut cfg = base.with_overrides(&sets)?;
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("intermoe-out"));
    cfg.out_dir = Some(out.clone());
    Ok((cfg, RunPaths::new(out)))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Verify = cli.command {
        let checks = pipeline::verify::run_all();
        for c in &checks {
            println!("{} {:<24} {:>6.2}s  {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.seconds, c.detail);
        }
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        if !failed.is_empty() {
            return Err(Error::Verification(failed.join(", ")).into());
        }
        return Ok(());
    }
    let (cfg, paths) = load_config(&cli)?;
    match &cli.command {
        Command::GenCorpus => {
            let split = pipeline::gen_corpus(&cfg, &paths)?;
            println!("corpus: {} train + {} held out in {}", split.train, split.heldout, paths.corpus().display());
        }
        Command::TrainVae => {
            let log = pipeline::train_vae_stage(&cfg, &paths)?;
            let last = log.last().context("no VAE steps were run")?;
            println!("vae: {} steps, final loss {:.5}", log.len(), last.total);
        }
        Command::TrainDenoiser => {
            let log = pipeline::train_denoiser_stage(&cfg, &paths)?;
            let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
            let ma = pipeline::moving_average(&losses, 100);
            println!("denoiser: {} steps, final 100-step mean loss {:.5}", log.len(), ma.last().context("no denoiser steps were run")?);
        }
        Command::Sample => {
            let rec = pipeline::sample_stage(&cfg, &paths)?;
            println!(
                "sample: {} interactions in {}, mean per-token selections {:.2} over {} steps",
                rec.samples.len(),
                paths.samples().display(),
                rec.mean_selection_total,
                rec.ddim_steps
            );
        }
        Command::Eval => {
            let rec = pipeline::eval_stage(&cfg, &paths)?;
            for (name, s) in &rec.generated.metrics {
                println!("{name:<18} {:>10.4} ± {:.4}", s.mean, s.ci95);
            }
            println!("{:<18} {:>10.4}", "fid_noise_decoded", rec.noise_decoded.get("fid").mean);
        }
        Command::Ablate { grid } => {
            let base = GridPoint {
                mode: cfg.denoiser.moe.mode,
                n_experts: cfg.denoiser.moe.n_experts,
                c_exp: cfg.denoiser.moe.c_exp,
            };
            let points = pipeline::parse_grid(grid, base)?;
            let out = pipeline::run_ablation(&cfg, &paths, &points)?;
            for p in &out.points {
                let f = p.report.get("fid");
                println!("{:<28} fid {:>9.4} ± {:.4}", p.point.name(), f.mean, f.ci95);
            }
            if !out.mode_ordering.is_empty() {
                let order: Vec<&str> = out.mode_ordering.iter().map(|m| m.0.as_str()).collect();
                println!("mode ordering by fid: {}", order.join(" < "));
            }
            if let Some(bad) = out.comparisons.iter().find(|c| !c.passed) {
                return Err(Error::Verification(format!(
                    "{} fid {:.4} exceeds {} fid {:.4} by more than its interval width {:.4}",
                    MoeMode::Dts.name(),
                    bad.dts_fid,
                    MoeMode::ExpertChoice.name(),
                    bad.expert_choice_fid,
                    bad.dts_ci95_width
                ))
                .into());
            }
        }
        Command::Verify => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
