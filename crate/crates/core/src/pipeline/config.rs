use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::csvae::{VaeConfig, VaeTrainConfig};
use crate::denoiser::{DenoiserConfig, DenoiserTrainConfig, DiffusionConfig, SamplerConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::Precision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub samples: usize,
    pub frames: usize,
    /// The last `heldout` samples are kept out of training.
    pub heldout: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            samples: 512,
            frames: 32,
            heldout: 128,
        }
    }
}

/// Reduced denoiser used for every ablation grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            blocks: 2,
            steps: 2000,
            batch: 16,
            lr: 1e-3,
            warmup: 100,
        }
    }
}

/// Every tunable of a run. The output directory is not part of the hash, so a
/// run reproduces byte-for-byte wherever it is placed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub denoiser_train: DenoiserTrainConfig,
    pub sampler: SamplerConfig,
    /// Prompts sampled together in one DDIM batch.
    pub sample_batch: usize,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            out_dir: None,
            corpus: CorpusConfig::default(),
            vae: VaeConfig::default(),
            vae_train: VaeTrainConfig::default(),
            denoiser: DenoiserConfig::default(),
            diffusion: DiffusionConfig::default(),
            denoiser_train: DenoiserTrainConfig::default(),
            sampler: SamplerConfig::default(),
            sample_batch: 32,
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a JSON document; missing keys take defaults, unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed JSON: {e}")))?;
        Self::from_value(value)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        check_keys(&value, &default_tree(), "")?;
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `a.b.c=value` overrides. Values parse as JSON, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        let defaults = default_tree();
        for set in sets {
            let set = set.as_ref();
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {set:?} is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
            let mut known = &defaults;
            for p in &path {
                known = known
                    .get(p)
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            let mut node = &mut tree;
            for p in &path[..path.len() - 1] {
                node = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("{key:?} does not name a section")))?
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Object(Default::default()));
            }
            node.as_object_mut()
                .ok_or_else(|| Error::Config(format!("{key:?} does not name a section")))?
                .insert(path[path.len() - 1].to_string(), value);
        }
        Self::from_value(tree)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.samples == 0 || c.heldout == 0 || c.heldout >= c.samples {
            return Err(Error::Config(format!(
                "corpus needs 0 < heldout < samples, got {} of {}",
                c.heldout, c.samples
            )));
        }
        let factor = 1usize << self.vae.levels;
        if c.frames % factor != 0 {
            return Err(Error::IndivisibleLength {
                len: c.frames,
                factor,
            });
        }
        if self.sample_batch == 0 {
            return Err(Error::Config("sample_batch must be positive".into()));
        }
        self.denoiser.moe.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Canonical form used for hashing: sorted keys, no output directory.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
        }
        v.to_string()
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Short prefix of the hash used as a run id.
    pub fn run_id(&self) -> String {
        self.hash()[..12].to_string()
    }
}

fn default_tree() -> Value {
    serde_json::to_value(RunConfig::default()).expect("default config serializes")
}

fn check_keys(value: &Value, known: &Value, prefix: &str) -> Result<()> {
    let (Some(obj), Some(known_obj)) = (value.as_object(), known.as_object()) else {
        return Ok(());
    };
    for (k, v) in obj {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        // out_dir is optional and absent from the serialized defaults.
        if prefix.is_empty() && k == "out_dir" {
            continue;
        }
        let inner = known_obj
            .get(k)
            .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
        check_keys(v, inner, &path)?;
    }
    Ok(())
}
