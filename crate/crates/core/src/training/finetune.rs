use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::batch::{ce_batch_loss, images_to_batch, predict_classes, LoadedDataset, LoadedSample};
use super::metrics::{MetricsLog, Step};
use super::optim::OptimizerState;
use super::schedule::exp_lr;
use crate::config::{ExperimentConfig, Schedule, Stage};
use crate::data::{kfold_splits, subsample_per_class, DatasetManifest, ImageTensor};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, EpochRecord, RunResult};
use crate::models::{transfer_backbone_weights, Checkpoint, HeadKind, Model, Setting};
use crate::nn::Mode;
use crate::seed::{derive_seed, rng, Purpose};

/// Training pool and, unless folds are configured, a held-out test set.
#[derive(Clone, Debug)]
pub struct FinetuneData {
    pub train: LoadedDataset,
    pub test: Option<LoadedDataset>,
}

impl FinetuneData {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let train = LoadedDataset::load(DatasetManifest::load(
            &config.resolve_path(&config.data.train_manifest),
        )?)?;
        let test = match &config.data.test_manifest {
            Some(p) => Some(LoadedDataset::load(DatasetManifest::load(&config.resolve_path(p))?)?),
            None => None,
        };
        if let Some(t) = &test {
            if t.manifest.class_names != train.manifest.class_names {
                return Err(Error::contract("train and test manifests declare different classes"));
            }
        }
        Ok(Self { train, test })
    }
}

/// Per-seed run from `config.seed`, loading data from disk.
pub fn run_finetuning(config: &ExperimentConfig, init: Option<&Checkpoint>) -> Result<RunResult> {
    let data = FinetuneData::load(config)?;
    run_finetuning_on(config, &data, init, config.seed, &mut MetricsLog::detached())
}

/// Seeds of the battery members, derived from the master seed.
pub fn battery_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64)
        .map(|i| derive_seed(master, Purpose::Battery, &[i]))
        .collect()
}

/// Runs `config.n_seeds` members in derivation order. `on_result` sees each
/// result as soon as it exists, so callers can persist partial batteries.
pub fn run_seed_battery(
    config: &ExperimentConfig,
    data: &FinetuneData,
    init: Option<&Checkpoint>,
    log: &mut MetricsLog,
    on_result: impl FnMut(&RunResult) -> Result<()>,
) -> Result<Vec<RunResult>> {
    let seeds = battery_seeds(config.seed, config.n_seeds);
    let mut keyed = run_battery_members(config, data, init, &seeds, log, on_result)?;
    Ok(seeds.iter().map(|s| keyed.remove(s).expect("every seed ran")).collect())
}

/// Runs the given members in the given order; results are keyed by seed.
pub fn run_battery_members(
    config: &ExperimentConfig,
    data: &FinetuneData,
    init: Option<&Checkpoint>,
    seeds: &[u64],
    log: &mut MetricsLog,
    mut on_result: impl FnMut(&RunResult) -> Result<()>,
) -> Result<BTreeMap<u64, RunResult>> {
    let distinct: BTreeSet<_> = seeds.iter().collect();
    if distinct.len() != seeds.len() {
        return Err(Error::contract("battery seeds must be distinct"));
    }
    let mut out = BTreeMap::new();
    for &seed in seeds {
        let r = run_finetuning_on(config, data, init, seed, log)?;
        on_result(&r)?;
        out.insert(seed, r);
    }
    Ok(out)
}

fn single_labels(samples: &[&LoadedSample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            s.target
                .as_ref()
                .and_then(|t| t.as_single())
                .ok_or_else(|| Error::contract(format!("record `{}` has no single class label", s.id)))
        })
        .collect()
}

fn training_subset(config: &ExperimentConfig, pool: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    match config.data.n_c {
        Some(n_c) => subsample_per_class(pool, n_c, seed),
        None => Ok(pool.clone()),
    }
}

/// One seed. With folds configured, trains once per fold and reports the
/// fold-mean accuracy and trace.
pub fn run_finetuning_on(
    config: &ExperimentConfig,
    data: &FinetuneData,
    init: Option<&Checkpoint>,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<RunResult> {
    if config.stage != Stage::Finetune {
        return Err(Error::config("stage", "run_finetuning needs a finetune config"));
    }
    let setting = init.map_or(Setting::Random, |c| c.meta.setting);
    let pool = &data.train.manifest;
    let k = data.train.num_classes();

    let mut fold_runs = Vec::new();
    let mut train_size = 0;
    match (config.data.folds, &data.test) {
        (Some(k), _) => {
            let split = kfold_splits(pool, k, seed)?;
            for fold in 0..k {
                let (train_m, test_m) = split.partition(pool, fold);
                let sub = training_subset(config, &train_m, derive_seed(seed, Purpose::Subsample, &[fold as u64]))?;
                train_size = sub.len();
                let train = data.train.select(&sub)?;
                let test = data.train.select(&test_m)?;
                fold_runs.push(train_and_evaluate(
                    config,
                    init,
                    seed,
                    Some(fold),
                    k,
                    &train,
                    &test,
                    log,
                )?);
            }
        }
        (None, Some(test_set)) => {
            let sub = training_subset(config, pool, seed)?;
            train_size = sub.len();
            let train = data.train.select(&sub)?;
            fold_runs.push(train_and_evaluate(
                config,
                init,
                seed,
                None,
                k,
                &train,
                &test_set.all(),
                log,
            )?);
        }
        (None, None) => return Err(Error::config("data.test_manifest", "no test set and no folds")),
    }

    let n = fold_runs.len() as f64;
    let final_test_accuracy = fold_runs.iter().map(|(a, _)| a).sum::<f64>() / n;
    let trace = (0..fold_runs[0].1.len())
        .map(|i| EpochRecord {
            epoch: fold_runs[0].1[i].epoch,
            train_loss: fold_runs.iter().map(|(_, t)| t[i].train_loss).sum::<f64>() / n,
            eval_accuracy: fold_runs.iter().map(|(_, t)| t[i].eval_accuracy).sum::<f64>() / n,
        })
        .collect();
    let n_c = config.data.n_c.unwrap_or(train_size / k);
    let r_percent = config
        .data
        .r_percent
        .unwrap_or(100.0 * train_size as f64 / pool.len() as f64);
    Ok(RunResult {
        seed,
        setting,
        dataset: config.data.dataset_tag.clone(),
        n_c,
        r_percent,
        final_test_accuracy,
        trace,
    })
}

fn evaluate(model: &Model<f32>, test: &[&LoadedSample], labels: &[usize]) -> Result<f64> {
    let images: Vec<&ImageTensor> = test.iter().map(|s| &s.image).collect();
    accuracy(&predict_classes(model, &images)?, labels)
}

#[allow(clippy::too_many_arguments)]
fn train_and_evaluate(
    config: &ExperimentConfig,
    init: Option<&Checkpoint>,
    seed: u64,
    fold: Option<usize>,
    k: usize,
    train: &[&LoadedSample],
    test: &[&LoadedSample],
    log: &mut MetricsLog,
) -> Result<(f64, Vec<EpochRecord>)> {
    let Schedule::Exp {
        base_lr,
        factor,
        epochs,
    } = config.schedule
    else {
        return Err(Error::config("schedule", "fine-tuning uses the exponential schedule"));
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::contract("fine-tuning needs non-empty train and test sets"));
    }
    let train_labels = single_labels(train)?;
    let test_labels = single_labels(test)?;
    let model_cfg = config.model.model_config(k, HeadKind::Classification);
    let mut model = transfer_backbone_weights(init, &model_cfg, seed)?;
    let mut opt = OptimizerState::<f32>::new(config.optimizer);
    let freeze = config.freeze_backbone;

    let mut trace = Vec::new();
    let mut last_acc = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        let lr = exp_lr(epoch, base_lr, factor);
        order.sort_unstable();
        order.shuffle(&mut rng(
            seed,
            Purpose::Shuffle,
            &[fold.map_or(0, |f| f as u64 + 1), epoch],
        ));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<&ImageTensor> = chunk.iter().map(|&i| &train[i].image).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let logits = model.forward(&images_to_batch(&images)?, Mode::Train);
            let bl = ce_batch_loss(&logits, &labels)?;
            model.zero_grad();
            model.backward(&bl.grad);
            opt.apply(model.params_mut(), lr, |name| !freeze || name.starts_with("head."))?;
            loss_sum += bl.loss;
            batches += 1;
        }
        let done = epoch + 1;
        let train_loss = loss_sum / batches as f64;
        let step = Step::Epoch {
            seed,
            fold,
            epoch: done,
        };
        log.record(step, "train", "loss", train_loss);
        if done % config.eval_every == 0 || done == epochs {
            let acc = evaluate(&model, test, &test_labels)?;
            log.record(step, "test", "accuracy", acc);
            trace.push(EpochRecord {
                epoch: done,
                train_loss,
                eval_accuracy: acc,
            });
            last_acc = Some(acc);
        }
    }
    let final_acc = match last_acc {
        Some(a) => a,
        None => evaluate(&model, test, &test_labels)?,
    };
    Ok((final_acc, trace))
}
