//! Experiment specifications, read from TOML.

use std::path::{Path, PathBuf};

use fss_core::adaptation::Method;
use fss_core::datasets::{synth_blobs, Dataset, SyntheticBlobConfig};
use fss_core::digest::Hasher;
use fss_core::encoder::TinyEncoderConfig;
use fss_core::trainer::{lr_preset, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Convention, DiskDataset};

pub const DEFAULT_SHOTS: [usize; 4] = [1, 2, 5, 10];
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetRef {
    Synthetic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default)]
        config: SyntheticBlobConfig,
    },
    Dir {
        path: PathBuf,
        #[serde(default)]
        convention: Convention,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        /// Seed of the 50/50 split used when the dataset ships no split lists.
        #[serde(default)]
        split_seed: u64,
    },
}

impl DatasetRef {
    pub fn open(&self) -> Result<Box<dyn Dataset>> {
        Ok(match self {
            DatasetRef::Synthetic { name, config } => {
                let mut ds = synth_blobs(config)?;
                if let Some(n) = name {
                    ds.name = n.clone();
                }
                Box::new(ds)
            }
            DatasetRef::Dir { path, convention, name, split_seed } => {
                let ds = DiskDataset::open(path, *convention, *split_seed)?;
                Box::new(match name {
                    Some(n) => ds.with_name(n.clone()),
                    None => ds,
                })
            }
        })
    }

    /// Key into the per-dataset learning-rate presets.
    pub fn preset_key(&self) -> String {
        match self {
            DatasetRef::Synthetic { .. } => "synthetic".into(),
            DatasetRef::Dir { convention: Convention::Cityscapes, .. } => "cityscapes".into(),
            DatasetRef::Dir { convention: Convention::Ppd, .. } => "ppd".into(),
            DatasetRef::Dir { path, name, .. } => name
                .clone()
                .or_else(|| path.file_name().and_then(|n| n.to_str()).map(String::from))
                .unwrap_or_default()
                .to_lowercase(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub name: String,
    pub config: TinyEncoderConfig,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec { name: "tiny".into(), config: TinyEncoderConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum LrPolicy {
    /// Dataset preset for the head stage (falling back to `train.base_lr`), `train.stage2_lr` for stage 2.
    #[default]
    Preset,
    Fixed { base: f64, stage2: Option<f64> },
    /// One run per value: the stage-2 rate for encoder-tuning methods, the head rate for probing methods.
    Grid { values: Vec<f64> },
}

/// Learning rates of one run: head stage and, for methods with a second stage, stage 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrChoice {
    pub stage1: f64,
    pub stage2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub methods: Vec<Method>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Pixels a class needs in an image to count as present.
    pub min_pixels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub datasets: Vec<DatasetRef>,
    pub encoder: EncoderSpec,
    pub lr: LrPolicy,
    /// Template for every run; `method`, `seed` and the learning rates are filled in per run.
    pub train: TrainConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "experiment".into(),
            methods: vec![Method::Linear],
            shots: DEFAULT_SHOTS.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            min_pixels: 1,
            output: None,
            datasets: vec![DatasetRef::Synthetic { name: None, config: SyntheticBlobConfig::default() }],
            encoder: EncoderSpec::default(),
            lr: LrPolicy::Preset,
            train: TrainConfig::synthetic(Method::Linear, 0),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.into()));
        if self.datasets.is_empty() {
            return bad("no datasets");
        }
        if self.methods.is_empty() {
            return bad("no methods");
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return bad("shots must be a non-empty list of positive values");
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        match &self.lr {
            LrPolicy::Grid { values } if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) => {
                return bad("lr grid must hold positive values");
            }
            LrPolicy::Fixed { base, stage2 } if !(*base > 0.0) || stage2.is_some_and(|v| !(v > 0.0)) => {
                return bad("fixed learning rates must be positive");
            }
            _ => {}
        }
        self.encoder.config.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Digest of everything that influences a run's outcome besides method, seed, shots and lr.
    pub fn spec_hash(&self) -> String {
        let mut h = Hasher::new();
        h.str(crate::VERSION).u64(self.min_pixels as u64);
        h.str(&serde_json::to_string(&self.datasets).expect("serializable"));
        h.str(&serde_json::to_string(&self.encoder).expect("serializable"));
        h.str(&serde_json::to_string(&self.train).expect("serializable"));
        h.finish_hex()[..16].to_string()
    }

    pub fn lr_choices(&self, dataset: &DatasetRef, method: Method) -> Vec<LrChoice> {
        let head = lr_preset(&dataset.preset_key()).unwrap_or(self.train.base_lr);
        let stage2 = method.has_stage2().then(|| self.train.stage2_lr());
        match &self.lr {
            LrPolicy::Preset => vec![LrChoice { stage1: head, stage2 }],
            LrPolicy::Fixed { base, stage2: s2 } => vec![LrChoice { stage1: *base, stage2: stage2.map(|d| s2.unwrap_or(d)) }],
            LrPolicy::Grid { values } => values
                .iter()
                .map(|&v| if method.has_stage2() { LrChoice { stage1: head, stage2: Some(v) } } else { LrChoice { stage1: v, stage2: None } })
                .collect(),
        }
    }

    /// Concrete training config for one run.
    pub fn train_config(&self, method: Method, seed: u64, lr: LrChoice) -> TrainConfig {
        TrainConfig { method, seed, base_lr: lr.stage1, stage2_lr: lr.stage2, ..self.train.clone() }
    }
}
