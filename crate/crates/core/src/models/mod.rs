//! Residual backbones, segmentation/classification heads and backbone
//! weight transfer.
//!
//! Parameter names are dotted paths; everything under `backbone.` is
//! determined by the preset alone and is what transfers between tasks,
//! everything under `head.` is task-specific.

pub mod checkpoint;
mod resnet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GlobalAvgPool, Linear, Mode, Module, Param, Real, Tensor, Upsample};
use crate::seed::{rng, Purpose};

pub use checkpoint::{Checkpoint, CheckpointMeta, StoredTensor};
pub use resnet::{Backbone, StageSpec};

use crate::nn::Conv2d;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Tiny,
    #[serde(rename = "resnet34-like")]
    Resnet34Like,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Resnet34Like => "resnet34-like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "resnet34-like" | "resnet34" => Ok(Preset::Resnet34Like),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn stem_channels(self) -> usize {
        match self {
            Preset::Tiny => 16,
            Preset::Resnet34Like => 64,
        }
    }

    pub fn stem_kernel(self) -> usize {
        match self {
            Preset::Tiny => 3,
            Preset::Resnet34Like => 7,
        }
    }

    /// Residual stages: (channels, blocks, stride).
    pub fn stages(self) -> Vec<StageSpec> {
        let s = |channels, blocks, stride| StageSpec {
            channels,
            blocks,
            stride,
        };
        match self {
            Preset::Tiny => vec![s(16, 1, 1), s(32, 1, 2), s(64, 1, 2)],
            Preset::Resnet34Like => vec![s(64, 3, 1), s(128, 4, 2), s(256, 6, 2), s(512, 3, 2)],
        }
    }

    /// Output stride without dilation (stem stride 2 times stage strides).
    pub fn natural_stride(self) -> usize {
        2 * self.stages().iter().map(|s| s.stride).product::<usize>()
    }

    pub fn feature_channels(self) -> usize {
        self.stages().last().unwrap().channels
    }

    pub fn default_head_dilations(self) -> Vec<usize> {
        match self {
            Preset::Tiny => vec![2],
            Preset::Resnet34Like => vec![6, 12, 18, 24],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Segmentation,
    Classification,
}

/// Pre-training setting a checkpoint came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Random,
    Classification,
    FullSeg,
    ScribbleSeg,
}

impl Setting {
    pub const ALL: [Setting; 4] = [
        Setting::Random,
        Setting::Classification,
        Setting::FullSeg,
        Setting::ScribbleSeg,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Setting::Random => "random",
            Setting::Classification => "classification",
            Setting::FullSeg => "full_seg",
            Setting::ScribbleSeg => "scribble_seg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::contract(format!("unknown pre-training setting `{s}`")))
    }

    /// Row label used in result tables.
    pub fn method_name(self) -> &'static str {
        match self {
            Setting::Random => "Random",
            Setting::Classification => "Classification",
            Setting::FullSeg => "Full Segmentation",
            Setting::ScribbleSeg => "Scribble Segmentation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub num_classes: usize,
    pub head: HeadKind,
    pub output_stride: usize,
    pub head_dilations: Vec<usize>,
    pub input_channels: usize,
}

impl ModelConfig {
    pub fn new(preset: Preset, num_classes: usize, head: HeadKind) -> Self {
        Self {
            preset,
            num_classes,
            head,
            output_stride: preset.natural_stride(),
            head_dilations: preset.default_head_dilations(),
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::contract("model needs at least 2 classes"));
        }
        if self.input_channels != 3 {
            return Err(Error::contract("models take 3-channel input"));
        }
        resnet::stage_layout(self.preset, self.output_stride)?;
        if self.head_dilations.is_empty() || self.head_dilations.contains(&0) {
            return Err(Error::contract(
                "head dilations must be a non-empty list of positive values",
            ));
        }
        Ok(())
    }
}

/// Sum of dilated 3×3 classifiers followed by bilinear upsampling to the
/// input resolution.
#[derive(Clone, Debug)]
pub struct SegHead<T> {
    pub branches: Vec<Conv2d<T>>,
    upsample: Upsample,
}

#[derive(Clone, Debug)]
pub struct ClsHead<T> {
    pool: GlobalAvgPool,
    pub fc: Linear<T>,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Head<T> {
    Segmentation(SegHead<T>),
    Classification(ClsHead<T>),
}

impl<T: Real> Head<T> {
    fn build(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng(seed, Purpose::HeadInit, &[]);
        let f = config.preset.feature_channels();
        match config.head {
            HeadKind::Segmentation => Head::Segmentation(SegHead {
                branches: config
                    .head_dilations
                    .iter()
                    .map(|&d| Conv2d::new(f, config.num_classes, 3, 1, d, d, true, &mut rng))
                    .collect(),
                upsample: Upsample::default(),
            }),
            HeadKind::Classification => Head::Classification(ClsHead {
                pool: GlobalAvgPool::default(),
                fc: Linear::new(f, config.num_classes, &mut rng),
            }),
        }
    }
}

impl<T: Real> Module<T> for Head<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        match self {
            Head::Segmentation(h) => {
                for (i, b) in h.branches.iter().enumerate() {
                    b.collect_params(&format!("{prefix}.classifier.{i}"), out);
                }
            }
            Head::Classification(h) => h.fc.collect_params(&format!("{prefix}.fc"), out),
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        match self {
            Head::Segmentation(h) => {
                for (i, b) in h.branches.iter_mut().enumerate() {
                    b.collect_params_mut(&format!("{prefix}.classifier.{i}"), out);
                }
            }
            Head::Classification(h) => h.fc.collect_params_mut(&format!("{prefix}.fc"), out),
        }
    }
}

/// Backbone plus head.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub head: Head<T>,
    input_hw: (usize, usize),
}

pub fn build_backbone<T: Real>(config: &ModelConfig, seed: u64) -> Result<Backbone<T>> {
    config.validate()?;
    Backbone::new(config.preset, config.output_stride, seed)
}

fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let backbone = build_backbone(config, seed)?;
    Ok(Model {
        config: config.clone(),
        backbone,
        head: Head::build(config, seed),
        input_hw: (0, 0),
    })
}

pub fn build_segmentation_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    if config.head != HeadKind::Segmentation {
        return Err(Error::contract("segmentation model needs a segmentation head config"));
    }
    build_model(config, seed)
}

pub fn build_classification_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    if config.head != HeadKind::Classification {
        return Err(Error::contract(
            "classification model needs a classification head config",
        ));
    }
    build_model(config, seed)
}

pub fn build_model_for<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    match config.head {
        HeadKind::Segmentation => build_segmentation_model(config, seed),
        HeadKind::Classification => build_classification_model(config, seed),
    }
}

impl<T: Real> Model<T> {
    /// Segmentation: `N×K×H×W` logits at input resolution.
    /// Classification: `N×K×1×1` logits.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        self.input_hw = (x.h, x.w);
        let feats = self.backbone.forward(x, mode);
        match &mut self.head {
            Head::Segmentation(h) => {
                let mut logits = h.branches[0].forward(&feats);
                for b in &mut h.branches[1..] {
                    logits.add_assign(&b.forward(&feats));
                }
                h.upsample.forward(&logits, x.h, x.w)
            }
            Head::Classification(h) => {
                let pooled = h.pool.forward(&feats);
                h.fc.forward(&pooled)
            }
        }
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let dfeats = match &mut self.head {
            Head::Segmentation(h) => {
                let dl = h.upsample.backward(dy);
                let mut acc = h.branches[0].backward(&dl);
                for b in &mut h.branches[1..] {
                    acc.add_assign(&b.backward(&dl));
                }
                acc
            }
            Head::Classification(h) => {
                let dp = h.fc.backward(dy);
                h.pool.backward(&dp)
            }
        };
        self.backbone.backward(&dfeats)
    }

    /// Evaluation-mode forward without caching.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let feats = self.backbone.infer(x);
        match &self.head {
            Head::Segmentation(h) => {
                let mut logits = h.branches[0].infer(&feats);
                for b in &h.branches[1..] {
                    logits.add_assign(&b.infer(&feats));
                }
                Upsample::infer(&logits, x.h, x.w)
            }
            Head::Classification(h) => h.fc.infer(&GlobalAvgPool::infer(&feats)),
        }
    }

    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.backbone.collect_params("backbone", &mut out);
        self.head.collect_params("head", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.backbone.collect_params_mut("backbone", &mut out);
        self.head.collect_params_mut("head", &mut out);
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Trainable scalar count (running statistics excluded).
    pub fn num_parameters(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.len())
            .sum()
    }

    pub fn backbone_parameters(&self) -> usize {
        let mut out = Vec::new();
        self.backbone.collect_params("backbone", &mut out);
        out.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.len()).sum()
    }
}

impl Model<f32> {
    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        let params = self
            .params()
            .into_iter()
            .map(|(name, p)| {
                (
                    name,
                    StoredTensor {
                        shape: p.shape.clone(),
                        data: p.value.clone(),
                    },
                )
            })
            .collect();
        Checkpoint { params, meta }
    }

    /// Rebuilds a model from a checkpoint holding every parameter.
    pub fn from_checkpoint(config: &ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut model = build_model_for::<f32>(config, ckpt.meta.master_seed)?;
        let mut missing = Vec::new();
        for (name, p) in model.params_mut() {
            match ckpt.params.get(&name) {
                Some(t) if t.shape == p.shape => p.value.copy_from_slice(&t.data),
                _ => missing.push(name),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Transfer {
                reason: "checkpoint lacks parameters or shapes differ".into(),
                names: missing,
            });
        }
        Ok(model)
    }
}

/// Builds a fresh model for `target` (head initialised from `seed`) and,
/// when `source` is given, copies every `backbone.*` tensor from it.
pub fn transfer_backbone_weights(source: Option<&Checkpoint>, target: &ModelConfig, seed: u64) -> Result<Model<f32>> {
    let mut model = build_model_for::<f32>(target, seed)?;
    let Some(source) = source else {
        return Ok(model);
    };
    if source.meta.preset != target.preset.name() {
        return Err(Error::Transfer {
            reason: format!(
                "source preset `{}` differs from target `{}`",
                source.meta.preset,
                target.preset.name()
            ),
            names: vec![],
        });
    }
    let mut offending = Vec::new();
    let mut wanted = Vec::new();
    for (name, p) in model.params_mut() {
        if !name.starts_with("backbone.") {
            continue;
        }
        wanted.push(name.clone());
        match source.params.get(&name) {
            Some(t) if t.shape == p.shape => p.value.copy_from_slice(&t.data),
            _ => offending.push(name),
        }
    }
    offending.extend(
        source
            .params
            .keys()
            .filter(|n| n.starts_with("backbone.") && !wanted.contains(n))
            .cloned(),
    );
    if !offending.is_empty() {
        return Err(Error::Transfer {
            reason: "backbone tensors missing or mismatched".into(),
            names: offending,
        });
    }
    Ok(model)
}
