use std::fs;
use std::path::Path;

use super::*;
use crate::moe::MoeMode;
use crate::numerics::{ParamStore, Tensor};
use crate::{Error, Precision};

fn tiny() -> RunConfig {
    RunConfig::default()
        .with_overrides(&[
            "corpus.samples=24",
            "corpus.frames=16",
            "corpus.heldout=8",
            "vae.channels=4",
            "vae.latent_dim=4",
            "vae_train.steps=12",
            "vae_train.batch=4",
            "denoiser.dim=16",
            "denoiser.text_dim=16",
            "denoiser.heads=2",
            "denoiser.blocks=1",
            "denoiser.moe.n_experts=4",
            "denoiser_train.steps=12",
            "denoiser_train.batch=4",
            "denoiser_train.warmup=2",
            "sampler.ddim_steps=4",
            "sample_batch=3",
            "eval.repeats=3",
            "eval.r_pool=4",
            "ablation.dim=16",
            "ablation.heads=2",
            "ablation.blocks=1",
            "ablation.steps=6",
            "ablation.batch=4",
        ])
        .unwrap()
}

fn run_all_stages(cfg: &RunConfig, root: &Path) -> EvalRecord {
    let paths = RunPaths::new(root);
    gen_corpus(cfg, &paths).unwrap();
    train_vae_stage(cfg, &paths).unwrap();
    train_denoiser_stage(cfg, &paths).unwrap();
    sample_stage(cfg, &paths).unwrap();
    eval_stage(cfg, &paths).unwrap()
}

#[test]
fn overrides_reach_nested_keys() {
    let cfg = RunConfig::default()
        .with_overrides(&["denoiser.moe.mode=token_choice", "denoiser.moe.c_exp=2", "seed=9"])
        .unwrap();
    assert_eq!(cfg.denoiser.moe.mode, MoeMode::TokenChoice);
    assert_eq!(cfg.denoiser.moe.c_exp, 2.0);
    assert_eq!(cfg.seed, 9);
    assert_eq!(RunConfig::default().with_overrides(&["denoiser.moe.top_k=2"]).unwrap().denoiser.moe.top_k, Some(2));
}

#[test]
fn config_errors_are_config_errors() {
    let d = RunConfig::default();
    for bad in ["denoiser.mystery=1", "nope=1", "seed", "denoiser.moe.mode=sideways", "corpus.heldout=600"] {
        assert!(matches!(d.with_overrides(&[bad]), Err(Error::Config(_))), "{bad}");
    }
    assert!(matches!(RunConfig::from_json("{ not json"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_json(r#"{"vae": {"channels": 8, "extra": 1}}"#), Err(Error::Config(_))));
    assert!(matches!(
        d.with_overrides(&["corpus.frames=30"]),
        Err(Error::IndivisibleLength { len: 30, factor: 4 })
    ));
}

#[test]
fn json_round_trip_and_hash() {
    let cfg = tiny();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    let mut moved = cfg.clone();
    moved.out_dir = Some("/elsewhere".into());
    assert_eq!(moved.hash(), cfg.hash());
    assert_ne!(cfg.with_overrides(&["seed=1"]).unwrap().hash(), cfg.hash());
    assert_eq!(cfg.hash().len(), 64);
    assert_eq!(cfg.run_id(), cfg.hash()[..12]);
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut store = ParamStore::<f64>::new();
    store.add("a", Tensor::from_f64([2, 3], &[1.0, -2.0, 3.5, 0.25, 1e-9, 7.0]).unwrap());
    store.add("b", Tensor::from_f64([1], &[0.1]).unwrap());
    save_checkpoint(&path, "thing", "abc", serde_json::json!({"x": 1}), serde_json::json!([1, 2]), &store).unwrap();
    let back = load_checkpoint::<f64>(&path, "thing").unwrap();
    assert_eq!(back.header.config_hash, "abc");
    assert_eq!(back.header.dtype, Precision::F64);
    assert_eq!(back.header.tensors[1].offset, 48);
    assert_eq!(back.tensors[0].1, store.tensors()[0]);
    // Cross-precision load.
    let as32 = load_checkpoint::<f32>(&path, "thing").unwrap();
    assert_eq!(as32.tensors[0].1.data()[2], 3.5f32);

    assert!(matches!(load_checkpoint::<f64>(&path, "other"), Err(Error::Checkpoint(_))));
    assert!(matches!(
        load_checkpoint::<f64>(&dir.path().join("absent.ckpt"), "thing"),
        Err(Error::MissingArtifact(_))
    ));
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&path, "thing"), Err(Error::Checkpoint(_))));
    fs::write(&path, b"JUNKJUNKJUNKJUNK").unwrap();
    assert!(matches!(load_checkpoint::<f64>(&path, "thing"), Err(Error::Checkpoint(_))));
}

#[test]
fn downstream_stages_report_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::new(dir.path());
    let cfg = tiny();
    assert!(matches!(train_vae_stage(&cfg, &paths), Err(Error::MissingArtifact(_))));
    gen_corpus(&cfg, &paths).unwrap();
    assert!(matches!(train_denoiser_stage(&cfg, &paths), Err(Error::MissingArtifact(_))));
    assert!(matches!(eval_stage(&cfg, &paths), Err(Error::MissingArtifact(_))));
    train_vae_stage(&cfg, &paths).unwrap();
    assert!(matches!(sample_stage(&cfg, &paths), Err(Error::MissingArtifact(_))));
}

#[test]
fn tiny_pipeline_is_reproducible() {
    let cfg = tiny();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let e1 = run_all_stages(&cfg, d1.path());
    let e2 = run_all_stages(&cfg, d2.path());
    assert_eq!(e1.run_id, e2.run_id);
    for rel in ["metrics.csv", "vae.ckpt", "denoiser.ckpt", "routing.csv", "samples/run_record.json"] {
        assert_eq!(fs::read(d1.path().join(rel)).unwrap(), fs::read(d2.path().join(rel)).unwrap(), "{rel}");
    }
    let record: RunRecord = serde_json::from_slice(&fs::read(d1.path().join("samples/run_record.json")).unwrap()).unwrap();
    assert_eq!(record.samples.len(), 8);
    assert_eq!(record.config_hash, cfg.hash());
    for s in &record.samples {
        for m in [&s.motion_a, &s.motion_b] {
            let a = fs::read(d1.path().join("samples").join(m)).unwrap();
            assert_eq!(a, fs::read(d2.path().join("samples").join(m)).unwrap());
            assert_eq!(&a[..4], b"MOT1");
        }
    }
    let rows = crate::eval::read_metric_rows(&d1.path().join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 14);
    assert!(rows.iter().all(|r| r.run_id == cfg.run_id()));
    assert_eq!(rows.iter().filter(|r| r.mode == "noise_decoded").count(), 7);
    let plot: serde_json::Value = serde_json::from_slice(&fs::read(d1.path().join("plot.json")).unwrap()).unwrap();
    assert!(!plot["denoiser_loss"].as_array().unwrap().is_empty());
    let emitted: serde_json::Value =
        serde_json::from_slice(&fs::read(d1.path().join("sample.config.json")).unwrap()).unwrap();
    assert_eq!(emitted["config_hash"], cfg.hash());

    // Sampling again from the same checkpoint rewrites identical files.
    let paths = RunPaths::new(d1.path());
    let before = fs::read(d1.path().join("samples").join(&record.samples[0].motion_a)).unwrap();
    sample_stage(&cfg, &paths).unwrap();
    assert_eq!(before, fs::read(d1.path().join("samples").join(&record.samples[0].motion_a)).unwrap());
}

#[test]
fn grid_parsing() {
    let base = GridPoint {
        mode: MoeMode::Dts,
        n_experts: 8,
        c_exp: 1.0,
    };
    let g = parse_grid(&["experts=4,8,16"], base).unwrap();
    assert_eq!(g.iter().map(|p| p.n_experts).collect::<Vec<_>>(), [4, 8, 16]);
    assert!(g.iter().all(|p| p.mode == MoeMode::Dts && p.c_exp == 1.0));
    let full = parse_grid::<&str>(&[], base).unwrap();
    assert_eq!(full.len(), 8);
    assert_eq!(parse_grid(&["mode=dts,expert_choice", "c_exp=0.8,2"], base).unwrap().len(), 4);
    for bad in ["experts", "experts=", "experts=0", "depth=2", "mode=sideways", "c_exp=-1"] {
        assert!(matches!(parse_grid(&[bad], base), Err(Error::Config(_))), "{bad}");
    }
    assert_eq!(base.name(), "dts_e8_c1");
}

#[test]
fn tiny_ablation_writes_tables() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::new(dir.path());
    gen_corpus(&cfg, &paths).unwrap();
    train_vae_stage(&cfg, &paths).unwrap();
    let base = GridPoint {
        mode: MoeMode::Dts,
        n_experts: 4,
        c_exp: 1.0,
    };
    let points = parse_grid(&["mode=dts,expert_choice"], base).unwrap();
    let out = run_ablation(&cfg, &paths, &points).unwrap();
    assert_eq!(out.points.len(), 2);
    assert_eq!(out.comparisons.len(), 1);
    assert_eq!(out.mode_ordering.len(), 2);
    let mut r = csv::Reader::from_path(paths.ablation().join("summary.csv")).unwrap();
    assert_eq!(r.headers().unwrap().len(), summary_header().len());
    assert_eq!(r.records().count(), 2);
    let long = crate::eval::read_metric_rows(&paths.ablation().join("metrics.csv")).unwrap();
    assert_eq!(long.len(), 14);
    assert!(paths.ablation().join("dts_e4_c1/routing.csv").exists());
    let c = &out.comparisons[0];
    assert_eq!(c.passed, c.dts_fid - c.expert_choice_fid <= c.dts_ci95_width);
}

#[test]
fn moving_average_is_trailing() {
    let m = moving_average(&[1.0, 2.0, 3.0, 4.0, 5.0], 2);
    assert_eq!(m, [1.0, 1.5, 2.5, 3.5, 4.5]);
}

#[test]
fn self_checks_pass() {
    for c in verify::run_all() {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
}
