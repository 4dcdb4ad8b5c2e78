use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::RunConfig;
use crate::csvae::{batch_tensor, person_clips, train_vae, CsVae, VaeConfig};
use crate::denoiser::{
    ddim_sample, train_denoiser, CooperativeDenoiser, DenoiserConfig, DenoiserLogRow, DenoiserTrainConfig,
    DiffusionConfig, LatentPair, NoiseSchedule, SamplerConfig, SelectionStats,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, extract, metric_rows, write_metric_rows, EvalReport, FeatureExtractor, MetricRow, PairedMotion};
use crate::moe::{read_telemetry, TelemetryWriter};
use crate::motion::{
    generate_synthetic_corpus, load_corpus, read_motion_file, write_corpus, write_motion_file, CorpusManifest,
    InteractionSample, MotionSequence, Normalizer, SkeletonTopology, FEATURE_DIM, MANIFEST_FILE,
};
use crate::numerics::{ParamStore, Tensor};
use crate::{rng, Precision, Real};

/// File layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn split(&self) -> PathBuf {
        self.corpus().join("split.json")
    }
    pub fn vae_ckpt(&self) -> PathBuf {
        self.root.join("vae.ckpt")
    }
    pub fn vae_loss(&self) -> PathBuf {
        self.root.join("vae_loss.csv")
    }
    pub fn denoiser_ckpt(&self) -> PathBuf {
        self.root.join("denoiser.ckpt")
    }
    pub fn denoiser_loss(&self) -> PathBuf {
        self.root.join("denoiser_loss.csv")
    }
    pub fn routing(&self) -> PathBuf {
        self.root.join("routing.csv")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn run_record(&self) -> PathBuf {
        self.samples().join("run_record.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn eval_record(&self) -> PathBuf {
        self.root.join("eval_record.json")
    }
    pub fn plot(&self) -> PathBuf {
        self.root.join("plot.json")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
    /// Effective configuration re-emitted by `stage`.
    pub fn stage_config(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}.config.json"))
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    require(path)?;
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn emit_config(paths: &RunPaths, cfg: &RunConfig, stage: &str) -> Result<()> {
    fs::create_dir_all(&paths.root)?;
    let mut v = serde_json::to_value(cfg)?;
    if let Some(o) = v.as_object_mut() {
        o.remove("out_dir");
        o.insert("config_hash".into(), Value::String(cfg.hash()));
    }
    write_json(&paths.stage_config(stage), &v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub config_hash: String,
    pub train: usize,
    pub heldout: usize,
}

/// A loaded corpus with its train/held-out split.
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub train: Vec<InteractionSample>,
    pub heldout: Vec<InteractionSample>,
}

impl Corpus {
    pub fn load(paths: &RunPaths) -> Result<Self> {
        require(&paths.corpus().join(MANIFEST_FILE))?;
        let split: CorpusSplit = read_json(&paths.split())?;
        let (manifest, mut samples) = load_corpus(&paths.corpus())?;
        if samples.len() != split.train + split.heldout {
            return Err(Error::Config(format!(
                "corpus holds {} samples but the split names {}",
                samples.len(),
                split.train + split.heldout
            )));
        }
        let heldout = samples.split_off(split.train);
        Ok(Self {
            manifest,
            train: samples,
            heldout,
        })
    }

    pub fn frames(&self) -> usize {
        self.manifest.frames
    }

    pub fn joints(&self) -> usize {
        self.manifest.topology.joint_count()
    }
}

pub fn gen_corpus(cfg: &RunConfig, paths: &RunPaths) -> Result<CorpusSplit> {
    emit_config(paths, cfg, "gen-corpus")?;
    let topo = SkeletonTopology::toy();
    let c = &cfg.corpus;
    let samples = generate_synthetic_corpus(cfg.seed, c.samples, c.frames, &topo)?;
    let train = c.samples - c.heldout;
    let norm = Normalizer::fit(&samples[..train])?;
    write_corpus(&paths.corpus(), cfg.seed, &topo, &samples, &norm)?;
    let split = CorpusSplit {
        config_hash: cfg.hash(),
        train,
        heldout: c.heldout,
    };
    write_json(&paths.split(), &split)?;
    info!("corpus: {} train, {} held out", train, c.heldout);
    Ok(split)
}

/// Global scalar affine that maps VAE latent means to roughly unit scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentScale {
    pub mean: f64,
    pub std: f64,
}

/// A VAE rebuilt from its checkpoint.
pub struct LoadedVae<T> {
    pub store: ParamStore<T>,
    pub vae: CsVae,
    pub scale: LatentScale,
    pub frames: usize,
    pub config_hash: String,
}

impl<T: Real> LoadedVae<T> {
    pub fn load(paths: &RunPaths) -> Result<Self> {
        let ck = load_checkpoint::<T>(&paths.vae_ckpt(), "vae")?;
        let cfg: VaeConfig = serde_json::from_value(ck.header.config["vae"].clone())?;
        let topo: SkeletonTopology = serde_json::from_value(ck.header.config["topology"].clone())?;
        let frames: usize = serde_json::from_value(ck.header.config["frames"].clone())?;
        let scale: LatentScale = serde_json::from_value(ck.header.extra["latent_scale"].clone())?;
        let mut store = ParamStore::new();
        let vae = CsVae::new(&mut store, cfg, topo, &mut rng::seeded(0))?;
        store.load_from(&ck.tensors)?;
        Ok(Self {
            store,
            vae,
            scale,
            frames,
            config_hash: ck.header.config_hash,
        })
    }

    pub fn seg_len(&self) -> Result<usize> {
        self.vae.latent_frames(self.frames)
    }

    /// Normalized latent means, `[T'·W]` per clip.
    pub fn encode(&self, clips: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        let joints = self.vae.topology().joint_count();
        let per = self.seg_len()? * self.vae.latent_width();
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(32) {
            let refs: Vec<&[f32]> = chunk.iter().map(Vec::as_slice).collect();
            let x = batch_tensor::<T>(&refs, self.frames, joints)?;
            let z = self.vae.encode_mean(&self.store, &x)?;
            for c in z.data().chunks_exact(per) {
                out.push(
                    c.iter()
                        .map(|v| ((v.as_f64() - self.scale.mean) / self.scale.std) as f32)
                        .collect(),
                );
            }
        }
        Ok(out)
    }

    /// Decodes normalized latents `[B·T', W]` to motion in corpus units.
    pub fn decode(&self, z: &Tensor<T>, norm: &Normalizer) -> Result<Vec<MotionSequence>> {
        let seg = self.seg_len()?;
        let (rows, _) = z.dims2()?;
        let b = rows / seg;
        let raw = z.map(|v| T::of(v.as_f64() * self.scale.std + self.scale.mean));
        let raw = raw.reshape([b, seg, self.vae.latent_joints(), self.vae.config().latent_dim])?;
        let y = self.vae.decode_value(&self.store, &raw)?;
        let joints = self.vae.topology().joint_count();
        let per = self.frames * joints * FEATURE_DIM;
        y.data()
            .chunks_exact(per)
            .map(|c| {
                let v: Vec<f32> = c.iter().map(|x| x.as_f64() as f32).collect();
                norm.denormalize(self.frames, joints, &v)
            })
            .collect()
    }
}

pub fn train_vae_stage(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<crate::csvae::VaeLogRow>> {
    match cfg.precision {
        Precision::F32 => train_vae_impl::<f32>(cfg, paths),
        Precision::F64 => train_vae_impl::<f64>(cfg, paths),
    }
}

fn train_vae_impl<T: Real>(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<crate::csvae::VaeLogRow>> {
    let corpus = Corpus::load(paths)?;
    emit_config(paths, cfg, "train-vae")?;
    let clips = person_clips(&corpus.train, &corpus.manifest.normalizer);
    let mut store = ParamStore::<T>::new();
    let vae = CsVae::new(
        &mut store,
        cfg.vae.clone(),
        corpus.manifest.topology.clone(),
        &mut rng::stream(cfg.seed, 0xA1),
    )?;
    let total = cfg.vae_train.steps;
    let log = train_vae(&mut store, &vae, &clips, corpus.frames(), &cfg.vae_train, cfg.seed, |r| {
        if r.step % 100 == 0 || r.step + 1 == total {
            info!("vae step {} loss {:.5}", r.step, r.total);
        }
    })?;
    write_csv(&paths.vae_loss(), &log)?;

    // Scalar latent statistics over the training clips.
    let unit = LoadedVae {
        store,
        vae,
        scale: LatentScale { mean: 0.0, std: 1.0 },
        frames: corpus.frames(),
        config_hash: cfg.hash(),
    };
    let z = unit.encode(&clips)?;
    let n = z.iter().map(Vec::len).sum::<usize>() as f64;
    let mean = z.iter().flatten().map(|&v| v as f64).sum::<f64>() / n;
    let var = z.iter().flatten().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let scale = LatentScale {
        mean,
        std: var.sqrt().max(1e-6),
    };
    save_checkpoint(
        &paths.vae_ckpt(),
        "vae",
        &cfg.hash(),
        json!({ "vae": cfg.vae, "topology": corpus.manifest.topology, "frames": corpus.frames() }),
        json!({ "latent_scale": scale, "final_loss": log.last().map(|r| r.total) }),
        &unit.store,
    )?;
    Ok(log)
}

/// Normalized latent pairs of the training split.
pub fn latent_pairs<T: Real>(vae: &LoadedVae<T>, samples: &[InteractionSample], norm: &Normalizer) -> Result<Vec<LatentPair>> {
    let clips = person_clips(samples, norm);
    let z = vae.encode(&clips)?;
    Ok(samples
        .iter()
        .zip(z.chunks_exact(2))
        .map(|(s, p)| LatentPair {
            a: p[0].clone(),
            b: p[1].clone(),
            tokens: s.text.tokens.clone(),
        })
        .collect())
}

/// Everything needed to rebuild a denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub latent_width: usize,
    pub seg_len: usize,
}

/// Trains a denoiser, streaming the loss log and routing telemetry to disk.
#[allow(clippy::too_many_arguments)]
pub fn fit_denoiser<T: Real>(
    arch: &DenoiserArch,
    train: &DenoiserTrainConfig,
    data: &[LatentPair],
    seed: u64,
    loss_csv: &Path,
    routing_csv: &Path,
) -> Result<(ParamStore<T>, CooperativeDenoiser, Vec<DenoiserLogRow>)> {
    let mut store = ParamStore::<T>::new();
    let mut model = CooperativeDenoiser::new(&mut store, &arch.denoiser, arch.latent_width, &mut rng::stream(seed, 0xD0))?;
    let schedule = NoiseSchedule::new(&arch.diffusion)?;
    let mut telemetry = TelemetryWriter::new(BufWriter::new(File::create(routing_csv)?));
    let mut failure = None;
    let total = train.steps;
    let log = train_denoiser(&mut store, &mut model, &schedule, data, arch.seg_len, train, seed, |row, rows| {
        if row.step % 100 == 0 || row.step + 1 == total {
            info!("denoiser step {} loss {:.5}", row.step, row.loss);
        }
        if failure.is_none() {
            if let Err(e) = telemetry.write(rows) {
                failure = Some(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    telemetry.flush()?;
    write_csv(loss_csv, &log)?;
    model.freeze_biases();
    Ok((store, model, log))
}

pub fn save_denoiser<T: Real>(
    path: &Path,
    cfg_hash: &str,
    arch: &DenoiserArch,
    model: &CooperativeDenoiser,
    store: &ParamStore<T>,
) -> Result<()> {
    let biases: Vec<Vec<f64>> = model.moe_layers().map(|m| m.bias.bias.clone()).collect();
    save_checkpoint(
        path,
        "denoiser",
        cfg_hash,
        serde_json::to_value(arch)?,
        json!({ "biases": biases }),
        store,
    )
}

pub struct LoadedDenoiser<T> {
    pub store: ParamStore<T>,
    pub model: CooperativeDenoiser,
    pub schedule: NoiseSchedule,
    pub arch: DenoiserArch,
    pub config_hash: String,
}

impl<T: Real> LoadedDenoiser<T> {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint::<T>(path, "denoiser")?;
        let arch: DenoiserArch = serde_json::from_value(ck.header.config.clone())?;
        let biases: Vec<Vec<f64>> = serde_json::from_value(ck.header.extra["biases"].clone())?;
        let mut store = ParamStore::new();
        let mut model = CooperativeDenoiser::new(&mut store, &arch.denoiser, arch.latent_width, &mut rng::seeded(0))?;
        store.load_from(&ck.tensors)?;
        if biases.len() != arch.denoiser.blocks {
            return Err(Error::Checkpoint(format!("{} bias vectors for {} blocks", biases.len(), arch.denoiser.blocks)));
        }
        for (m, b) in model.moe_layers_mut().zip(biases) {
            if b.len() != m.bias.bias.len() {
                return Err(Error::Checkpoint("bias vector length mismatch".into()));
            }
            m.bias.bias = b;
        }
        model.freeze_biases();
        Ok(Self {
            store,
            model,
            schedule: NoiseSchedule::new(&arch.diffusion)?,
            arch,
            config_hash: ck.header.config_hash,
        })
    }
}

pub fn train_denoiser_stage(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<DenoiserLogRow>> {
    match cfg.precision {
        Precision::F32 => train_denoiser_impl::<f32>(cfg, paths),
        Precision::F64 => train_denoiser_impl::<f64>(cfg, paths),
    }
}

fn train_denoiser_impl<T: Real>(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<DenoiserLogRow>> {
    let corpus = Corpus::load(paths)?;
    let vae = LoadedVae::<T>::load(paths)?;
    emit_config(paths, cfg, "train-denoiser")?;
    let data = latent_pairs(&vae, &corpus.train, &corpus.manifest.normalizer)?;
    let arch = DenoiserArch {
        denoiser: cfg.denoiser.clone(),
        diffusion: cfg.diffusion.clone(),
        latent_width: vae.vae.latent_width(),
        seg_len: vae.seg_len()?,
    };
    let (store, model, log) = fit_denoiser::<T>(
        &arch,
        &cfg.denoiser_train,
        &data,
        cfg.seed,
        &paths.denoiser_loss(),
        &paths.routing(),
    )?;
    save_denoiser(&paths.denoiser_ckpt(), &cfg.hash(), &arch, &model, &store)?;
    Ok(log)
}

/// Guided DDIM generation for `prompts`, decoded to motion. Prompts are
/// processed in chunks; chunk `c` draws its noise from a seed derived from `(seed, c)`.
#[allow(clippy::too_many_arguments)]
pub fn generate<T: Real>(
    den: &LoadedDenoiser<T>,
    vae: &LoadedVae<T>,
    norm: &Normalizer,
    sampler: &SamplerConfig,
    prompts: &[&[u32]],
    chunk: usize,
    seed: u64,
) -> Result<(Vec<(MotionSequence, MotionSequence)>, SelectionStats)> {
    let seg = den.arch.seg_len;
    let mut motions = Vec::with_capacity(prompts.len());
    let mut per_block = vec![0.0; den.model.blocks.len()];
    let mut steps = 0;
    for (c, group) in prompts.chunks(chunk.max(1)).enumerate() {
        let s = crate::rng::derive(seed, c as u64);
        let out = ddim_sample(&den.model, &den.store, &den.schedule, sampler, group, seg, s)?;
        for (acc, v) in per_block.iter_mut().zip(&out.selections.per_block) {
            *acc += v * group.len() as f64;
        }
        steps = out.selections.steps;
        let a = vae.decode(&out.z_a, norm)?;
        let b = vae.decode(&out.z_b, norm)?;
        motions.extend(a.into_iter().zip(b));
    }
    per_block.iter_mut().for_each(|v| *v /= prompts.len().max(1) as f64);
    Ok((motions, SelectionStats { per_block, steps }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: usize,
    pub text: String,
    pub tokens: Vec<u32>,
    pub motion_a: PathBuf,
    pub motion_b: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config_hash: String,
    pub denoiser_config_hash: String,
    pub vae_config_hash: String,
    pub mode: String,
    pub ddim_steps: usize,
    pub cfg_weight: f64,
    /// Per-token selections summed over sampling steps, averaged per block.
    pub selections: SelectionStats,
    pub mean_selection_total: f64,
    /// Routing telemetry recorded during training.
    pub telemetry: PathBuf,
    pub samples: Vec<SampleEntry>,
}

pub fn sample_stage(cfg: &RunConfig, paths: &RunPaths) -> Result<RunRecord> {
    match cfg.precision {
        Precision::F32 => sample_impl::<f32>(cfg, paths),
        Precision::F64 => sample_impl::<f64>(cfg, paths),
    }
}

fn sample_impl<T: Real>(cfg: &RunConfig, paths: &RunPaths) -> Result<RunRecord> {
    let corpus = Corpus::load(paths)?;
    let vae = LoadedVae::<T>::load(paths)?;
    let den = LoadedDenoiser::<T>::load(&paths.denoiser_ckpt())?;
    emit_config(paths, cfg, "sample")?;
    let prompts: Vec<&[u32]> = corpus.heldout.iter().map(|s| s.text.tokens.as_slice()).collect();
    let (motions, selections) = generate(
        &den,
        &vae,
        &corpus.manifest.normalizer,
        &cfg.sampler,
        &prompts,
        cfg.sample_batch,
        cfg.seed,
    )?;
    let dir = paths.samples();
    fs::create_dir_all(&dir)?;
    let mut samples = Vec::with_capacity(motions.len());
    for (s, (a, b)) in corpus.heldout.iter().zip(&motions) {
        let pa = PathBuf::from(format!("{:05}_a.mot", s.id));
        let pb = PathBuf::from(format!("{:05}_b.mot", s.id));
        write_motion_file(a, dir.join(&pa))?;
        write_motion_file(b, dir.join(&pb))?;
        samples.push(SampleEntry {
            id: s.id,
            text: s.text.text.clone(),
            tokens: s.text.tokens.clone(),
            motion_a: pa,
            motion_b: pb,
        });
    }
    let record = RunRecord {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        denoiser_config_hash: den.config_hash.clone(),
        vae_config_hash: vae.config_hash.clone(),
        mode: den.arch.denoiser.moe.mode.name().into(),
        ddim_steps: cfg.sampler.ddim_steps,
        cfg_weight: cfg.sampler.cfg_weight,
        mean_selection_total: selections.mean(),
        selections,
        telemetry: PathBuf::from("../routing.csv"),
        samples,
    };
    write_json(&paths.run_record(), &record)?;
    Ok(record)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub config_hash: String,
    pub run_id: String,
    pub mode: String,
    pub generated: EvalReport,
    /// Gaussian latents decoded by the VAE, scored against the same references.
    pub noise_decoded: EvalReport,
    /// FID between training and held-out real motion.
    pub fid_train_vs_heldout: f64,
    pub mean_selection_total: f64,
}

/// Loads the samples named by a run record.
pub fn load_samples(paths: &RunPaths, record: &RunRecord) -> Result<Vec<PairedMotion>> {
    let dir = paths.samples();
    record
        .samples
        .iter()
        .map(|e| {
            let a = dir.join(&e.motion_a);
            let b = dir.join(&e.motion_b);
            require(&a)?;
            require(&b)?;
            Ok(PairedMotion {
                a: read_motion_file(a)?,
                b: read_motion_file(b)?,
                tokens: e.tokens.clone(),
            })
        })
        .collect()
}

/// Decodes standard-normal latents, one per prompt.
pub fn noise_decoded<T: Real>(
    vae: &LoadedVae<T>,
    norm: &Normalizer,
    prompts: &[&[u32]],
    seed: u64,
) -> Result<Vec<PairedMotion>> {
    let seg = vae.seg_len()?;
    let w = vae.vae.latent_width();
    let mut r = rng::stream(seed, 0x401E);
    let n = prompts.len();
    let za = Tensor::<T>::randn([n * seg, w], 1.0, &mut r);
    let zb = Tensor::<T>::randn([n * seg, w], 1.0, &mut r);
    let a = vae.decode(&za, norm)?;
    let b = vae.decode(&zb, norm)?;
    Ok(a.into_iter()
        .zip(b)
        .zip(prompts)
        .map(|((a, b), t)| PairedMotion { a, b, tokens: t.to_vec() })
        .collect())
}

pub fn eval_stage(cfg: &RunConfig, paths: &RunPaths) -> Result<EvalRecord> {
    match cfg.precision {
        Precision::F32 => eval_impl::<f32>(cfg, paths),
        Precision::F64 => eval_impl::<f64>(cfg, paths),
    }
}

fn eval_impl<T: Real>(cfg: &RunConfig, paths: &RunPaths) -> Result<EvalRecord> {
    let corpus = Corpus::load(paths)?;
    let record: RunRecord = read_json(&paths.run_record())?;
    let vae = LoadedVae::<T>::load(paths)?;
    emit_config(paths, cfg, "eval")?;
    let gen = load_samples(paths, &record)?;
    let real: Vec<PairedMotion> = corpus.heldout.iter().map(PairedMotion::from).collect();
    let train: Vec<PairedMotion> = corpus.train.iter().map(PairedMotion::from).collect();
    let prompts: Vec<&[u32]> = real.iter().map(|p| p.tokens.as_slice()).collect();
    let noise = noise_decoded(&vae, &corpus.manifest.normalizer, &prompts, cfg.seed)?;

    let ex = FeatureExtractor::new(cfg.eval.feature_seed, corpus.joints(), cfg.eval.feature_width)?;
    let real_f = extract(&ex, &real)?;
    let gen_report = evaluate(&cfg.eval, &extract(&ex, &gen)?, &real_f, cfg.seed)?;
    let noise_report = evaluate(&cfg.eval, &extract(&ex, &noise)?, &real_f, cfg.seed)?;
    let fid_ref = crate::eval::fid(&extract(&ex, &train)?.motion, &real_f.motion)?;

    let run_id = cfg.run_id();
    let mut rows: Vec<MetricRow> = metric_rows(&run_id, &record.mode, &gen_report);
    rows.extend(metric_rows(&run_id, "noise_decoded", &noise_report));
    write_metric_rows(File::create(paths.metrics())?, &rows)?;

    let out = EvalRecord {
        config_hash: cfg.hash(),
        run_id,
        mode: record.mode.clone(),
        generated: gen_report,
        noise_decoded: noise_report,
        fid_train_vs_heldout: fid_ref,
        mean_selection_total: record.mean_selection_total,
    };
    write_json(&paths.eval_record(), &out)?;
    write_json(&paths.plot(), &plot_data(paths, &out)?)?;
    Ok(out)
}

/// Trailing mean of `values` over `window` entries ending at each index.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut acc = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            acc += v;
            if i >= w {
                acc -= values[i - w];
            }
            acc / (i + 1).min(w) as f64
        })
        .collect()
}

#[derive(Deserialize)]
struct LossRow {
    step: usize,
    #[serde(alias = "total")]
    loss: f64,
}

fn read_loss(path: &Path) -> Result<Vec<(usize, f64)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<LossRow>()
        .map(|row| row.map(|r| (r.step, r.loss)).map_err(Error::from))
        .collect()
}

/// Curves over training steps for external plotting.
fn plot_data(paths: &RunPaths, eval: &EvalRecord) -> Result<Value> {
    let curve = |rows: Vec<(usize, f64)>| {
        let ma = moving_average(&rows.iter().map(|r| r.1).collect::<Vec<_>>(), 100);
        rows.iter()
            .zip(ma)
            .filter(|(r, _)| r.0 % 10 == 0)
            .map(|(r, m)| json!({ "step": r.0, "loss": r.1, "moving_average": m }))
            .collect::<Vec<_>>()
    };
    let mut selection = Vec::new();
    if paths.routing().exists() {
        let rows = read_telemetry(&paths.routing())?;
        let mut by_step = std::collections::BTreeMap::<(u64, usize), (f64, f64, usize)>::new();
        for r in rows {
            let e = by_step.entry((r.step, r.block)).or_default();
            e.0 += r.k_select;
            e.1 = r.k_exp;
            e.2 += 1;
        }
        for ((step, block), (sum, k_exp, n)) in by_step {
            selection.push(json!({ "step": step, "block": block, "mean_k_select": sum / n as f64, "k_exp": k_exp }));
        }
    }
    let metrics: Value = eval
        .generated
        .metrics
        .iter()
        .map(|(k, s)| (k.clone(), json!({ "mean": s.mean, "ci95_low": s.low(), "ci95_high": s.high() })))
        .collect::<serde_json::Map<_, _>>()
        .into();
    Ok(json!({
        "config_hash": eval.config_hash,
        "vae_loss": curve(read_loss(&paths.vae_loss())?),
        "denoiser_loss": curve(read_loss(&paths.denoiser_loss())?),
        "routing_selection": selection,
        "metrics": metrics,
    }))
}
