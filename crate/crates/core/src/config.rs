//! Experiment configuration files.
//!
//! Configs are TOML documents. Unknown keys are rejected, stage-specific
//! keys are checked against the stage, and every default is filled in
//! before hashing. The hash is taken over the canonical (key-sorted) JSON
//! rendering of the resolved config, so formatting and key order in the
//! source file do not matter.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::augment::AugmentParams;
use crate::error::{Error, Result};
use crate::losses::Normalization;
use crate::models::{HeadKind, ModelConfig, Preset, Setting};
use crate::training::optim::{AdamParams, OptimizerKind};
use crate::training::schedule::POLY_POWER;

pub const PRETRAIN_LR: f64 = 2.5e-4;
pub const PRETRAIN_MOMENTUM: f64 = 0.9;
pub const PRETRAIN_WEIGHT_DECAY: f64 = 5e-4;
pub const PRETRAIN_MAX_ITER: u64 = 40_000;
pub const FINETUNE_LR: f64 = 1e-4;
pub const FINETUNE_DECAY: f64 = 0.94;
pub const FINETUNE_EPOCHS: u64 = 100;
pub const N_SEEDS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    stage: Option<Stage>,
    setting: Option<String>,
    seed: Option<u64>,
    max_iter: Option<u64>,
    epochs: Option<u64>,
    batch_size: Option<usize>,
    n_seeds: Option<usize>,
    normalization: Option<Normalization>,
    log_every: Option<u64>,
    eval_every: Option<u64>,
    freeze_backbone: Option<bool>,
    data: Option<RawData>,
    model: Option<RawModel>,
    optim: Option<RawOptim>,
    augment: Option<RawAugment>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    train_manifest: Option<PathBuf>,
    test_manifest: Option<PathBuf>,
    dataset_tag: Option<String>,
    n_c: Option<usize>,
    r_percent: Option<f64>,
    folds: Option<usize>,
    exclude_background: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    preset: Option<String>,
    output_stride: Option<usize>,
    head_dilations: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptim {
    lr: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    power: Option<f64>,
    factor: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAugment {
    crop_size: Option<usize>,
    scale_min: Option<f64>,
    scale_max: Option<f64>,
    hflip_p: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_manifest: PathBuf,
    pub test_manifest: Option<PathBuf>,
    pub dataset_tag: String,
    pub n_c: Option<usize>,
    pub r_percent: Option<f64>,
    pub folds: Option<usize>,
    pub exclude_background: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub preset: Preset,
    pub output_stride: usize,
    pub head_dilations: Vec<usize>,
}

impl ModelSection {
    pub fn model_config(&self, num_classes: usize, head: HeadKind) -> ModelConfig {
        ModelConfig {
            preset: self.preset,
            num_classes,
            head,
            output_stride: self.output_stride,
            head_dilations: self.head_dilations.clone(),
            input_channels: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Poly { base_lr: f64, power: f64, max_iter: u64 },
    Exp { base_lr: f64, factor: f64, epochs: u64 },
}

/// A fully resolved pre-training or fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub stage: Stage,
    /// Pre-training setting; `None` for fine-tuning (the init decides).
    pub setting: Option<Setting>,
    pub seed: u64,
    pub batch_size: usize,
    pub n_seeds: usize,
    pub normalization: Normalization,
    pub log_every: u64,
    pub eval_every: u64,
    pub freeze_backbone: bool,
    pub data: DataConfig,
    pub model: ModelSection,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub augment: Option<AugmentParams>,
    /// Directory relative paths resolve against; not part of the hash.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn reject(present: bool, path: &str, stage: Stage) -> Result<()> {
    if present {
        let s = match stage {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        };
        return Err(Error::config(path, format!("not valid in a {s} config")));
    }
    Ok(())
}

fn positive(v: f64, path: &str) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(path, format!("must be positive, got {v}")))
    }
}

fn unit(v: f64, path: &str) -> Result<f64> {
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(Error::config(path, format!("must lie in [0, 1), got {v}")))
    }
}

impl ExperimentConfig {
    pub fn parse_str(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let path = e
                .span()
                .map(|s| {
                    let line = text[..s.start].lines().count().max(1);
                    format!("line {line}")
                })
                .unwrap_or_else(|| "<document>".into());
            Error::config(path, msg)
        })?;
        Self::resolve(raw, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse_str(&text, &base)
    }

    fn resolve(raw: RawConfig, base_dir: &Path) -> Result<Self> {
        let stage = raw
            .stage
            .ok_or_else(|| Error::config("stage", "missing (pretrain or finetune)"))?;
        let data = raw.data.unwrap_or_default();
        let model = raw.model.unwrap_or_default();
        let optim = raw.optim.unwrap_or_default();

        let preset = Preset::parse(model.preset.as_deref().unwrap_or("tiny"))
            .map_err(|e| Error::config("model.preset", e.to_string()))?;
        let model = ModelSection {
            preset,
            output_stride: model.output_stride.unwrap_or_else(|| preset.natural_stride()),
            head_dilations: model.head_dilations.unwrap_or_else(|| preset.default_head_dilations()),
        };
        model
            .model_config(2, HeadKind::Segmentation)
            .validate()
            .map_err(|e| match e {
                Error::Config { .. } => e,
                other => Error::config("model", other.to_string()),
            })?;

        let train_manifest = data
            .train_manifest
            .ok_or_else(|| Error::config("data.train_manifest", "missing"))?;
        let dataset_tag = data.dataset_tag.unwrap_or_else(|| {
            train_manifest
                .parent()
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        });
        let batch_size = raw.batch_size.unwrap_or(match stage {
            Stage::Pretrain => 8,
            Stage::Finetune => 32,
        });
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }

        let cfg = match stage {
            Stage::Pretrain => {
                reject(raw.epochs.is_some(), "epochs", stage)?;
                reject(raw.n_seeds.is_some(), "n_seeds", stage)?;
                reject(raw.eval_every.is_some(), "eval_every", stage)?;
                reject(raw.freeze_backbone.is_some(), "freeze_backbone", stage)?;
                reject(optim.factor.is_some(), "optim.factor", stage)?;
                reject(optim.beta1.is_some(), "optim.beta1", stage)?;
                reject(optim.beta2.is_some(), "optim.beta2", stage)?;
                reject(optim.eps.is_some(), "optim.eps", stage)?;
                reject(data.n_c.is_some(), "data.n_c", stage)?;
                reject(data.folds.is_some(), "data.folds", stage)?;
                reject(data.r_percent.is_some(), "data.r_percent", stage)?;
                reject(data.test_manifest.is_some(), "data.test_manifest", stage)?;
                let setting = raw
                    .setting
                    .as_deref()
                    .ok_or_else(|| Error::config("setting", "missing (classification, full_seg or scribble_seg)"))?;
                let setting = Setting::parse(setting).map_err(|e| Error::config("setting", e.to_string()))?;
                if setting == Setting::Random {
                    return Err(Error::config("setting", "`random` is not a pre-training setting"));
                }
                let aug = raw.augment.unwrap_or_default();
                let d = AugmentParams::default();
                let augment = AugmentParams {
                    crop_size: aug.crop_size.unwrap_or(d.crop_size),
                    scale_min: positive(aug.scale_min.unwrap_or(d.scale_min), "augment.scale_min")?,
                    scale_max: positive(aug.scale_max.unwrap_or(d.scale_max), "augment.scale_max")?,
                    hflip_p: aug.hflip_p.unwrap_or(d.hflip_p),
                };
                if augment.scale_max < augment.scale_min {
                    return Err(Error::config("augment.scale_max", "must be ≥ scale_min"));
                }
                if augment.crop_size == 0 {
                    return Err(Error::config("augment.crop_size", "must be at least 1"));
                }
                if !(0.0..=1.0).contains(&augment.hflip_p) {
                    return Err(Error::config("augment.hflip_p", "must lie in [0, 1]"));
                }
                ExperimentConfig {
                    stage,
                    setting: Some(setting),
                    seed: raw.seed.unwrap_or(0),
                    batch_size,
                    n_seeds: 1,
                    normalization: raw.normalization.unwrap_or_default(),
                    log_every: raw.log_every.unwrap_or(50).max(1),
                    eval_every: 1,
                    freeze_backbone: false,
                    data: DataConfig {
                        train_manifest,
                        test_manifest: None,
                        dataset_tag,
                        n_c: None,
                        r_percent: None,
                        folds: None,
                        exclude_background: data.exclude_background.unwrap_or(true),
                    },
                    model,
                    optimizer: OptimizerKind::SgdMomentum {
                        momentum: unit(optim.momentum.unwrap_or(PRETRAIN_MOMENTUM), "optim.momentum")?,
                        weight_decay: optim.weight_decay.unwrap_or(PRETRAIN_WEIGHT_DECAY),
                    },
                    schedule: Schedule::Poly {
                        base_lr: positive(optim.lr.unwrap_or(PRETRAIN_LR), "optim.lr")?,
                        power: positive(optim.power.unwrap_or(POLY_POWER), "optim.power")?,
                        max_iter: raw.max_iter.unwrap_or(PRETRAIN_MAX_ITER),
                    },
                    augment: Some(augment),
                    base_dir: base_dir.to_path_buf(),
                }
            }
            Stage::Finetune => {
                reject(raw.max_iter.is_some(), "max_iter", stage)?;
                reject(raw.setting.is_some(), "setting", stage)?;
                reject(raw.augment.is_some(), "augment", stage)?;
                reject(raw.normalization.is_some(), "normalization", stage)?;
                reject(optim.momentum.is_some(), "optim.momentum", stage)?;
                reject(optim.weight_decay.is_some(), "optim.weight_decay", stage)?;
                reject(optim.power.is_some(), "optim.power", stage)?;
                reject(data.exclude_background.is_some(), "data.exclude_background", stage)?;
                if data.test_manifest.is_none() && data.folds.is_none() {
                    return Err(Error::config(
                        "data.test_manifest",
                        "finetune needs a test manifest or data.folds",
                    ));
                }
                if data.test_manifest.is_some() && data.folds.is_some() {
                    return Err(Error::config(
                        "data.folds",
                        "use either a test manifest or cross-validation folds",
                    ));
                }
                if let Some(k) = data.folds {
                    if k < 2 {
                        return Err(Error::config("data.folds", "need at least 2 folds"));
                    }
                }
                let n_seeds = raw.n_seeds.unwrap_or(N_SEEDS);
                if n_seeds == 0 {
                    return Err(Error::config("n_seeds", "must be at least 1"));
                }
                let d = AdamParams::default();
                ExperimentConfig {
                    stage,
                    setting: None,
                    seed: raw.seed.unwrap_or(0),
                    batch_size,
                    n_seeds,
                    normalization: Normalization::default(),
                    log_every: raw.log_every.unwrap_or(1).max(1),
                    eval_every: raw.eval_every.unwrap_or(1).max(1),
                    freeze_backbone: raw.freeze_backbone.unwrap_or(false),
                    data: DataConfig {
                        train_manifest,
                        test_manifest: data.test_manifest,
                        dataset_tag,
                        n_c: data.n_c,
                        r_percent: data.r_percent,
                        folds: data.folds,
                        exclude_background: true,
                    },
                    model,
                    optimizer: OptimizerKind::Adam(AdamParams {
                        beta1: unit(optim.beta1.unwrap_or(d.beta1), "optim.beta1")?,
                        beta2: unit(optim.beta2.unwrap_or(d.beta2), "optim.beta2")?,
                        eps: positive(optim.eps.unwrap_or(d.eps), "optim.eps")?,
                    }),
                    schedule: Schedule::Exp {
                        base_lr: positive(optim.lr.unwrap_or(FINETUNE_LR), "optim.lr")?,
                        factor: positive(optim.factor.unwrap_or(FINETUNE_DECAY), "optim.factor")?,
                        epochs: raw.epochs.unwrap_or(FINETUNE_EPOCHS),
                    },
                    augment: None,
                    base_dir: base_dir.to_path_buf(),
                }
            }
        };
        Ok(cfg)
    }

    /// Canonical JSON: object keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn max_iter(&self) -> Option<u64> {
        match self.schedule {
            Schedule::Poly { max_iter, .. } => Some(max_iter),
            Schedule::Exp { .. } => None,
        }
    }

    pub fn epochs(&self) -> Option<u64> {
        match self.schedule {
            Schedule::Exp { epochs, .. } => Some(epochs),
            Schedule::Poly { .. } => None,
        }
    }
}
