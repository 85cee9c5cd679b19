use rand::seq::SliceRandom;

use super::batch::{bce_batch_loss, images_to_batch, seg_batch_loss, BatchLoss, LoadedDataset};
use super::metrics::{MetricsLog, Step};
use super::optim::OptimizerState;
use super::schedule::poly_lr;
use crate::config::{ExperimentConfig, Schedule, Stage};
use crate::data::{augment_pair, derive_multilabel_target, ClassTarget, DatasetManifest, ImageTensor, LabelMask};
use crate::error::{Error, Result};
use crate::models::{build_model_for, Checkpoint, CheckpointMeta, HeadKind, Setting};
use crate::nn::Mode;
use crate::seed::{rng, Purpose};

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    /// Snapshot with the best training monitor seen at a logging step.
    pub best: Checkpoint,
    pub log: MetricsLog,
}

/// Loads the training manifest named by `config` and pre-trains on it.
pub fn run_pretraining(config: &ExperimentConfig) -> Result<Checkpoint> {
    let manifest = DatasetManifest::load(&config.resolve_path(&config.data.train_manifest))?;
    let data = LoadedDataset::load(manifest)?;
    Ok(pretrain(config, &data)?.checkpoint)
}

/// Yields the dataset index of every position in the endless stream of
/// per-epoch shuffles.
struct Sampler {
    n: usize,
    seed: u64,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl Sampler {
    fn index(&mut self, position: u64) -> usize {
        let epoch = position / self.n as u64;
        if self.epoch != Some(epoch) {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut rng(self.seed, Purpose::Shuffle, &[epoch]));
            self.epoch = Some(epoch);
        }
        self.order[(position % self.n as u64) as usize]
    }
}

fn multi_target(t: &ClassTarget, k: usize) -> ClassTarget {
    match t {
        ClassTarget::Single(l) => {
            let mut bits = vec![false; k];
            bits[*l] = true;
            ClassTarget::Multi(bits)
        }
        m => m.clone(),
    }
}

pub fn pretrain(config: &ExperimentConfig, data: &LoadedDataset) -> Result<PretrainOutput> {
    if config.stage != Stage::Pretrain {
        return Err(Error::config("stage", "run_pretraining needs a pretrain config"));
    }
    let setting = config.setting.ok_or_else(|| Error::config("setting", "missing"))?;
    let Schedule::Poly {
        base_lr,
        power,
        max_iter,
    } = config.schedule
    else {
        return Err(Error::config("schedule", "pre-training uses the poly schedule"));
    };
    let augment = config.augment.expect("pretrain config carries augmentation");
    let k = data.num_classes();
    let samples = data.all();
    if samples.is_empty() {
        return Err(Error::contract("pre-training dataset is empty"));
    }

    let head = match setting {
        Setting::Classification => HeadKind::Classification,
        Setting::FullSeg | Setting::ScribbleSeg => HeadKind::Segmentation,
        Setting::Random => return Err(Error::config("setting", "`random` is not a pre-training setting")),
    };
    // Per-sample supervision, resolved once.
    let mut targets = Vec::new();
    let mut masks = Vec::new();
    for s in &samples {
        match head {
            HeadKind::Classification => {
                let t = match (&s.target, &s.mask) {
                    (Some(t), _) => multi_target(t, k),
                    (None, Some(m)) => derive_multilabel_target(m, config.data.exclude_background)?,
                    (None, None) => {
                        return Err(Error::contract(format!(
                            "record `{}` has neither labels nor a mask",
                            s.id
                        )))
                    }
                };
                targets.push(t);
            }
            HeadKind::Segmentation => {
                let m = s
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::contract(format!("record `{}` has no mask for {}", s.id, setting.tag())))?;
                masks.push(m);
            }
        }
    }

    let model_cfg = config.model.model_config(k, head);
    let mut model = build_model_for::<f32>(&model_cfg, config.seed)?;
    let mut opt = OptimizerState::<f32>::new(config.optimizer);
    let mut log = MetricsLog::new(&config.config_hash(), config.seed, "pretrain");
    let meta = |iteration| CheckpointMeta {
        config_hash: config.config_hash(),
        setting,
        iteration,
        master_seed: config.seed,
        preset: config.model.preset.name().to_string(),
    };
    let mut best = (f64::NEG_INFINITY, model.to_checkpoint(meta(0)));
    let mut sampler = Sampler {
        n: samples.len(),
        seed: config.seed,
        epoch: None,
        order: Vec::new(),
    };

    let bs = config.batch_size as u64;
    for iter in 0..max_iter {
        let lr = poly_lr(iter, max_iter, base_lr, power)?;
        let mut images: Vec<ImageTensor> = Vec::with_capacity(config.batch_size);
        let mut batch_masks: Vec<LabelMask> = Vec::new();
        let mut batch_targets: Vec<&ClassTarget> = Vec::new();
        for j in 0..bs {
            let position = iter * bs + j;
            let idx = sampler.index(position);
            let mut r = rng(config.seed, Purpose::Augment, &[position]);
            let mask = masks.get(idx).copied();
            let (img, m) = augment_pair(&samples[idx].image, mask, &augment, &mut r);
            images.push(img);
            match head {
                HeadKind::Segmentation => batch_masks.push(m.expect("mask present")),
                HeadKind::Classification => batch_targets.push(&targets[idx]),
            }
        }
        let refs: Vec<&ImageTensor> = images.iter().collect();
        let x = images_to_batch(&refs)?;
        let logits = model.forward(&x, Mode::Train);
        let bl: BatchLoss = match head {
            HeadKind::Segmentation => {
                let mrefs: Vec<&LabelMask> = batch_masks.iter().collect();
                seg_batch_loss(&logits, &mrefs, config.normalization)?
            }
            HeadKind::Classification => bce_batch_loss(&logits, &batch_targets)?,
        };
        if bl.used > 0 {
            model.zero_grad();
            model.backward(&bl.grad);
            opt.apply(model.params_mut(), lr, |_| true)?;
        }

        let done = iter + 1;
        if done % config.log_every == 0 || done == max_iter || iter == 0 {
            log.record(Step::Iter(done), "train", "loss", bl.loss);
            log.record(Step::Iter(done), "train", "lr", lr);
            let acc = bl.accuracy();
            if let Some(a) = acc {
                let metric = match head {
                    HeadKind::Segmentation => "pixel_accuracy",
                    HeadKind::Classification => "label_accuracy",
                };
                log.record(Step::Iter(done), "train", metric, a);
            }
            let score = acc.unwrap_or(-bl.loss);
            if score > best.0 {
                best = (score, model.to_checkpoint(meta(done)));
            }
        }
    }
    model.zero_grad();
    Ok(PretrainOutput {
        checkpoint: model.to_checkpoint(meta(max_iter)),
        best: best.1,
        log,
    })
}
