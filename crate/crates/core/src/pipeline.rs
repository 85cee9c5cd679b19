//! On-disk experiment runs and the desk-scale reproduction.
//!
//! Every run writes under `out/<hash>/{checkpoints,logs,results}`, where
//! the hash identifies the resolved config (plus the initialization for
//! fine-tuning). Nothing written depends on wall-clock time or absolute
//! paths, so reruns of the same configs give identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Stage};
use crate::data::manifest::DatasetManifest;
use crate::data::synth::{generate_synthetic_dataset, Domain, SynthSpec, Task};
use crate::data::{scribble_dataset, ImageTensor, LabelMask, ScribbleParams};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, aggregate_all, emit_results_table, pixel_accuracy, RunResult, TableFormat};
use crate::models::{Checkpoint, HeadKind, Model, Setting};
use crate::training::{
    predict_classes, predict_masks, pretrain, run_seed_battery, FinetuneData, LoadedDataset, MetricsLog,
};

/// `out/<hash>` with its three sub-directories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(out: &Path, hash: &str) -> Result<Self> {
        let root = out.join(hash);
        for sub in ["checkpoints", "logs", "results"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self { root })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Hash of a fine-tuning run: the config hash combined with the
/// initialization's own hash (`none` for random init).
pub fn finetune_hash(config: &ExperimentConfig, init: Option<&Checkpoint>) -> String {
    let init_tag = init.map_or("none".to_string(), |c| {
        format!("{}:{}", c.meta.setting.tag(), c.meta.config_hash)
    });
    let digest = Sha256::digest(format!("{}\ninit={init_tag}", config.canonical_json()).as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ConfigRecord {
    config_hash: String,
    master_seed: u64,
    config: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct PretrainArtifacts {
    pub dir: RunDir,
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
}

/// Pre-trains and writes `final.ckpt`, `best.ckpt`, the metrics log and the
/// resolved config.
pub fn pretrain_to_disk(config: &ExperimentConfig, out: &Path) -> Result<PretrainArtifacts> {
    if config.stage != Stage::Pretrain {
        return Err(Error::config("stage", "the pretrain command needs a pretrain config"));
    }
    let manifest = DatasetManifest::load(&config.resolve_path(&config.data.train_manifest))?;
    let data = LoadedDataset::load(manifest)?;
    let hash = config.config_hash();
    let dir = RunDir::create(out, &hash)?;
    let result = pretrain(config, &data)?;
    let checkpoint_path = dir.checkpoints().join("final.ckpt");
    result.checkpoint.save(&checkpoint_path)?;
    result.best.save(&dir.checkpoints().join("best.ckpt"))?;
    result.log.save(&dir.logs().join("metrics.jsonl"))?;
    write_json(
        &dir.results().join("config.json"),
        &ConfigRecord {
            config_hash: hash,
            master_seed: config.seed,
            config: serde_json::to_value(config)?,
        },
    )?;
    Ok(PretrainArtifacts {
        dir,
        checkpoint: result.checkpoint,
        checkpoint_path,
    })
}

/// Per-seed results of one battery, as written to `results/runs.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunsFile {
    pub config_hash: String,
    pub master_seed: u64,
    pub dataset: String,
    pub init: String,
    pub runs: Vec<RunResult>,
}

#[derive(Clone, Debug)]
pub struct FinetuneArtifacts {
    pub dir: RunDir,
    pub runs: RunsFile,
}

/// Runs the seed battery. Each member's result is written as soon as it
/// finishes, so an aborted battery leaves its completed members on disk.
pub fn finetune_to_disk(config: &ExperimentConfig, init: Option<&Path>, out: &Path) -> Result<FinetuneArtifacts> {
    if config.stage != Stage::Finetune {
        return Err(Error::config("stage", "the finetune command needs a finetune config"));
    }
    let init_ckpt = init.map(Checkpoint::load).transpose()?;
    let data = FinetuneData::load(config)?;
    let hash = finetune_hash(config, init_ckpt.as_ref());
    let dir = RunDir::create(out, &hash)?;
    let mut log = MetricsLog::new(&hash, config.seed, "finetune");
    let results_dir = dir.results();
    let outcome = run_seed_battery(config, &data, init_ckpt.as_ref(), &mut log, |r| {
        write_json(
            &results_dir.join(format!("run_{:020}.json", r.seed)),
            &RunsFile {
                config_hash: hash.clone(),
                master_seed: config.seed,
                dataset: config.data.dataset_tag.clone(),
                init: init_tag(init_ckpt.as_ref()),
                runs: vec![r.clone()],
            },
        )
    });
    log.save(&dir.logs().join("metrics.jsonl"))?;
    let runs = outcome?;
    let file = RunsFile {
        config_hash: hash.clone(),
        master_seed: config.seed,
        dataset: config.data.dataset_tag.clone(),
        init: init_tag(init_ckpt.as_ref()),
        runs,
    };
    write_json(&dir.results().join("runs.json"), &file)?;
    write_json(
        &dir.results().join("config.json"),
        &ConfigRecord {
            config_hash: hash,
            master_seed: config.seed,
            config: serde_json::to_value(config)?,
        },
    )?;
    Ok(FinetuneArtifacts { dir, runs: file })
}

fn init_tag(init: Option<&Checkpoint>) -> String {
    init.map_or("none".to_string(), |c| {
        format!("{}:{}", c.meta.setting.tag(), c.meta.config_hash)
    })
}

/// Evaluates a checkpoint on the dataset of `config`: pixel accuracy against
/// masks for segmentation checkpoints, accuracy against single labels for
/// classification checkpoints.
pub fn evaluate_checkpoint(config: &ExperimentConfig, checkpoint: &Checkpoint) -> Result<f64> {
    let path = match (&config.stage, &config.data.test_manifest) {
        (Stage::Finetune, Some(p)) => p,
        _ => &config.data.train_manifest,
    };
    let data = LoadedDataset::load(DatasetManifest::load(&config.resolve_path(path))?)?;
    let k = data.num_classes();
    let head = match checkpoint.meta.setting {
        Setting::Classification | Setting::Random => HeadKind::Classification,
        Setting::FullSeg | Setting::ScribbleSeg => HeadKind::Segmentation,
    };
    let model = Model::from_checkpoint(&config.model.model_config(k, head), checkpoint)?;
    let samples = data.all();
    let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
    match head {
        HeadKind::Segmentation => {
            let preds = predict_masks(&model, &images)?;
            let refs: Vec<&LabelMask> = samples
                .iter()
                .map(|s| {
                    s.mask
                        .as_ref()
                        .ok_or_else(|| Error::contract(format!("record `{}` has no mask", s.id)))
                })
                .collect::<Result<_>>()?;
            let accs: Vec<f64> = preds
                .iter()
                .zip(refs)
                .map(|(p, r)| pixel_accuracy(p, r))
                .collect::<Result<_>>()?;
            Ok(accs.iter().sum::<f64>() / accs.len() as f64)
        }
        HeadKind::Classification => {
            let labels: Vec<usize> = samples
                .iter()
                .map(|s| {
                    s.target
                        .as_ref()
                        .and_then(|t| t.as_single())
                        .ok_or_else(|| Error::contract(format!("record `{}` has no single label", s.id)))
                })
                .collect::<Result<_>>()?;
            accuracy(&predict_classes(&model, &images)?, &labels)
        }
    }
}

fn find_runs_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_runs_files(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "runs.json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Every `runs.json` below `paths` (or the files themselves).
pub fn collect_runs(paths: &[PathBuf]) -> Result<Vec<RunsFile>> {
    let mut files = Vec::new();
    for p in paths {
        find_runs_files(p, &mut files)?;
    }
    files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
            let runs: RunsFile = serde_json::from_str(&text).map_err(|e| Error::Manifest {
                path: f.clone(),
                message: format!("not a results file: {e}"),
            })?;
            if let Some(r) = runs.runs.iter().find(|r| r.dataset != runs.dataset) {
                return Err(Error::contract(format!(
                    "{}: run with dataset tag `{}` inside a `{}` results file",
                    f.display(),
                    r.dataset,
                    runs.dataset
                )));
            }
            Ok(runs)
        })
        .collect()
}

/// The rendered table plus the config hash and master seed of every aggregated run file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub hash: String,
    pub sources: Vec<(String, u64)>,
    pub table: String,
}

pub fn build_report(files: &[RunsFile], format: TableFormat) -> Result<Report> {
    let runs: Vec<RunResult> = files.iter().flat_map(|f| f.runs.iter().cloned()).collect();
    if runs.is_empty() {
        return Err(Error::contract("no results to report"));
    }
    let rows = aggregate_all(&runs)?;
    let mut sources: Vec<(String, u64)> = files.iter().map(|f| (f.config_hash.clone(), f.master_seed)).collect();
    sources.sort();
    sources.dedup();
    let mut hasher = Sha256::new();
    for (h, s) in &sources {
        hasher.update(format!("{h}:{s}\n").as_bytes());
    }
    let hash = hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
    Ok(Report {
        hash,
        sources,
        table: emit_results_table(&rows, format),
    })
}

pub fn report_extension(format: TableFormat) -> &'static str {
    match format {
        TableFormat::Csv => "csv",
        TableFormat::Markdown => "md",
        TableFormat::Json => "json",
    }
}

/// Writes `out/report-<hash>/report.<ext>` and `sources.json`.
pub fn write_report(report: &Report, format: TableFormat, out: &Path) -> Result<PathBuf> {
    let dir = out.join(format!("report-{}", report.hash));
    let path = dir.join(format!("report.{}", report_extension(format)));
    write_text(&path, &report.table)?;
    let sources: Vec<_> = report
        .sources
        .iter()
        .map(|(h, s)| serde_json::json!({ "config_hash": h, "master_seed": s }))
        .collect();
    write_json(&dir.join("sources.json"), &sources)?;
    Ok(path)
}

/// Sizes and hyperparameters of the desk-scale reproduction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskPlan {
    pub seed: u64,
    pub source_images: usize,
    pub source_classes: usize,
    pub target_classes: usize,
    pub target_train_per_class: usize,
    pub target_test: usize,
    pub image_size: usize,
    pub pretrain_iters: u64,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub finetune_epochs: u64,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub n_seeds: usize,
    pub n_c: Vec<usize>,
}

impl Default for DeskPlan {
    fn default() -> Self {
        Self {
            seed: 1,
            source_images: 128,
            source_classes: 5,
            target_classes: 4,
            target_train_per_class: 40,
            target_test: 200,
            image_size: 64,
            pretrain_iters: 1500,
            pretrain_lr: 0.01,
            pretrain_batch: 8,
            finetune_epochs: 30,
            finetune_lr: 1e-3,
            finetune_batch: 8,
            n_seeds: 5,
            n_c: vec![4, 8, 16],
        }
    }
}

impl DeskPlan {
    /// A seconds-scale plan exercising every stage.
    pub fn smoke() -> Self {
        Self {
            source_images: 12,
            target_train_per_class: 4,
            target_test: 12,
            image_size: 32,
            pretrain_iters: 6,
            pretrain_batch: 4,
            finetune_epochs: 2,
            finetune_batch: 4,
            n_seeds: 2,
            n_c: vec![2],
            ..Self::default()
        }
    }

    fn pretrain_toml(&self, setting: Setting, manifest: &str) -> String {
        format!(
            "stage = \"pretrain\"\nsetting = \"{}\"\nseed = {}\nmax_iter = {}\nbatch_size = {}\nlog_every = 50\n\n\
             [data]\ntrain_manifest = \"{manifest}\"\ndataset_tag = \"synthetic-a\"\n\n\
             [model]\npreset = \"tiny\"\n\n[optim]\nlr = {:?}\n\n[augment]\ncrop_size = {}\n",
            setting.tag(),
            self.seed,
            self.pretrain_iters,
            self.pretrain_batch,
            self.pretrain_lr,
            self.image_size
        )
    }

    fn finetune_toml(&self, n_c: usize) -> String {
        let pool = self.target_classes * self.target_train_per_class;
        format!(
            "stage = \"finetune\"\nseed = {}\nepochs = {}\nbatch_size = {}\nn_seeds = {}\neval_every = 5\n\n\
             [data]\ntrain_manifest = \"../data/b_train/manifest.jsonl\"\ntest_manifest = \"../data/b_test/manifest.jsonl\"\n\
             dataset_tag = \"synthetic-b\"\nn_c = {n_c}\nr_percent = {:?}\n\n[model]\npreset = \"tiny\"\n\n[optim]\nlr = {:?}\n",
            self.seed,
            self.finetune_epochs,
            self.finetune_batch,
            self.n_seeds,
            100.0 * (n_c * self.target_classes) as f64 / pool as f64,
            self.finetune_lr
        )
    }
}

/// Paths produced by [`reproduce`].
#[derive(Clone, Debug)]
pub struct Reproduction {
    pub pretrain_checkpoints: Vec<(Setting, PathBuf)>,
    pub runs: Vec<RunsFile>,
    pub report: Report,
    pub report_path: PathBuf,
}

/// synth-data → make-scribbles → 3× pretrain → 4× finetune battery per
/// N_c → report, all under `root`.
pub fn reproduce(root: &Path, plan: &DeskPlan) -> Result<Reproduction> {
    let data = root.join("data");
    let configs = root.join("configs");
    let out = root.join("out");
    fs::create_dir_all(&configs).map_err(|e| Error::io(&configs, e))?;

    let source = SynthSpec {
        domain: Domain::A,
        task: Task::Seg,
        n: plan.source_images,
        image_size: plan.image_size,
        num_classes: plan.source_classes,
        seed: plan.seed,
    };
    let source_manifest = generate_synthetic_dataset(&source, &data.join("a"))?;
    let scribble_params = ScribbleParams {
        seed: plan.seed,
        ..ScribbleParams::default()
    };
    scribble_dataset(&source_manifest, &scribble_params, &data.join("a_scribble"))?;
    let target = |n, seed| SynthSpec {
        domain: Domain::B,
        task: Task::Cls,
        n,
        image_size: plan.image_size,
        num_classes: plan.target_classes,
        seed,
    };
    generate_synthetic_dataset(
        &target(plan.target_classes * plan.target_train_per_class, plan.seed),
        &data.join("b_train"),
    )?;
    generate_synthetic_dataset(
        &target(plan.target_test, plan.seed.wrapping_add(1)),
        &data.join("b_test"),
    )?;

    let mut pretrain_checkpoints = Vec::new();
    for (setting, manifest) in [
        (Setting::Classification, "../data/a/manifest.jsonl"),
        (Setting::FullSeg, "../data/a/manifest.jsonl"),
        (Setting::ScribbleSeg, "../data/a_scribble/manifest.jsonl"),
    ] {
        let path = configs.join(format!("pretrain_{}.toml", setting.tag()));
        write_text(&path, &plan.pretrain_toml(setting, manifest))?;
        let art = pretrain_to_disk(&ExperimentConfig::load(&path)?, &out)?;
        pretrain_checkpoints.push((setting, art.checkpoint_path));
    }

    let mut runs = Vec::new();
    for &n_c in &plan.n_c {
        let path = configs.join(format!("finetune_nc{n_c}.toml"));
        write_text(&path, &plan.finetune_toml(n_c))?;
        let cfg = ExperimentConfig::load(&path)?;
        runs.push(finetune_to_disk(&cfg, None, &out)?.runs);
        for (_, ckpt) in &pretrain_checkpoints {
            runs.push(finetune_to_disk(&cfg, Some(ckpt), &out)?.runs);
        }
    }
    let report = build_report(&runs, TableFormat::Markdown)?;
    let report_path = write_report(&report, TableFormat::Markdown, &out)?;
    Ok(Reproduction {
        pretrain_checkpoints,
        runs,
        report,
        report_path,
    })
}
