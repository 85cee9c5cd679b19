//! Acceptance suite: one pass/fail line per criterion.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 5 6`.

mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scribble_transfer::config::ExperimentConfig;
use scribble_transfer::data::synth::{class_names, generate_sample};
use scribble_transfer::data::{
    kfold_splits, subsample_per_class, synthesize_scribbles, ClassTarget, DatasetManifest, Domain, ImageTensor,
    LabelMask, MaskKind, Record, ScribbleParams, SynthSpec, Task, IGNORE,
};
use scribble_transfer::evaluation::{aggregate_all, emit_results_table, pixel_accuracy, RunResult, TableFormat};
use scribble_transfer::losses::{
    bce_multilabel, bce_multilabel_with_grad, masked_seg_loss, masked_seg_loss_with_grad, LogitsMap, Normalization,
};
use scribble_transfer::models::{build_model_for, HeadKind, Model, Setting};
use scribble_transfer::pipeline::{reproduce, DeskPlan};
use scribble_transfer::training::{exp_lr, poly_lr, predict_masks, pretrain, LoadedDataset, LoadedSample};

type Verdict = (bool, String);
type Criterion = (u32, &'static str, fn() -> Verdict);

const FD_STEP: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;

fn fd_rel(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn seg_fd_error(logits: &LogitsMap, mask: &LabelMask, mode: Normalization) -> (f64, bool) {
    let (h, w) = logits.shape();
    let k = logits.num_classes();
    let (_, grad) = masked_seg_loss_with_grad(logits, mask, mode).unwrap();
    let mut worst = 0.0f64;
    for i in 0..logits.data().len() {
        let shifted = |delta: f64| {
            let mut data = logits.data().to_vec();
            data[i] += delta;
            let l = LogitsMap::new(h, w, k, data).unwrap();
            masked_seg_loss(&l, mask, mode).unwrap().value
        };
        let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(fd_rel(grad[i], numeric));
    }
    let ignored_zero = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == IGNORE)
        .all(|(p, _)| grad[p * k..(p + 1) * k].iter().all(|&g| g == 0.0));
    (worst, ignored_zero)
}

fn bce_fd_error(z: &[f64], target: &ClassTarget) -> f64 {
    let (_, grad) = bce_multilabel_with_grad(z, target).unwrap();
    let mut worst = 0.0f64;
    for i in 0..z.len() {
        let shifted = |delta: f64| {
            let mut v = z.to_vec();
            v[i] += delta;
            bce_multilabel(&v, target).unwrap()
        };
        let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(fd_rel(grad[i], numeric));
    }
    worst
}

fn loss_gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst, mut ignored_ok, mut ignored_seen) = (0.0f64, true, 0);
    for _ in 0..50 {
        let (h, w, k) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(2..7));
        let logits = common::random_logits(h, w, k, &mut rng);
        let mask = common::random_mask(h, w, k, 0.35, &mut rng);
        ignored_seen += mask.data().iter().filter(|&&l| l == IGNORE).count();
        for mode in [Normalization::Labeled, Normalization::AllPixels] {
            let (err, zero) = seg_fd_error(&logits, &mask, mode);
            worst = worst.max(err);
            ignored_ok &= zero;
        }
        let kb = rng.random_range(2..9);
        let z: Vec<f64> = (0..kb).map(|_| rng.random_range(-6.0..6.0)).collect();
        let t = ClassTarget::Multi((0..kb).map(|_| rng.random_bool(0.4)).collect());
        worst = worst.max(bce_fd_error(&z, &t));
    }
    (
        worst < FD_TOLERANCE && ignored_ok && ignored_seen > 0,
        format!(
            "50 instances x (2 seg modes + bce), max rel err {worst:.2e} (< {FD_TOLERANCE:e}), \
             {ignored_seen} ignored pixels all with zero gradient: {ignored_ok}"
        ),
    )
}

fn plain_mean_ce(logits: &LogitsMap, mask: &LabelMask) -> f64 {
    let k = logits.num_classes();
    let n = mask.data().len();
    let mut total = 0.0;
    for (p, &label) in mask.data().iter().enumerate() {
        let z = &logits.data()[p * k..(p + 1) * k];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[label as usize];
    }
    total / n as f64
}

fn loss_reduction() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst, mut zero_ok) = (0.0f64, true);
    for _ in 0..50 {
        let (h, w, k) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(2..22));
        let logits = common::random_logits(h, w, k, &mut rng);
        let dense = common::random_mask(h, w, k, 0.0, &mut rng);
        let reference = plain_mean_ce(&logits, &dense);
        let empty = LabelMask::filled(h, w, k, MaskKind::Scribble, IGNORE);
        for mode in [Normalization::Labeled, Normalization::AllPixels] {
            worst = worst.max(common::rel_err(
                masked_seg_loss(&logits, &dense, mode).unwrap().value,
                reference,
            ));
            let (v, g) = masked_seg_loss_with_grad(&logits, &empty, mode).unwrap();
            zero_ok &= v.value == 0.0 && g.iter().all(|&x| x == 0.0);
        }
    }
    (
        worst <= 1e-12 && zero_ok,
        format!("50 dense masks, max rel err vs plain mean CE {worst:.2e} (<= 1e-12); all-ignored gives exactly 0: {zero_ok}"),
    )
}

fn schedules() -> Verdict {
    let (worst, n) = common::schedule_oracle_error();
    let a = poly_lr(20000, 40000, 2.5e-4, 0.9).unwrap();
    let b = exp_lr(2, 1e-4, 0.94);
    let anchors = common::rel_err(a, 2.5e-4 * 0.5f64.powf(0.9)) <= 1e-12 && common::rel_err(b, 8.836e-5) <= 1e-12;
    (
        worst <= 1e-12 && n >= 1000 && anchors,
        format!("{n} points, max rel err {worst:.2e} (<= 1e-12); anchors {a:.6e}, {b:.6e}"),
    )
}

fn optimizers() -> Verdict {
    let (worst, n) = common::optimizer_oracle_error();
    (
        worst <= 1e-10,
        format!("{n} SGD/Adam steps over 8 trajectories, max err {worst:.2e} (<= 1e-10)"),
    )
}

fn two_class_set(n: usize, offset: usize, scribble: bool) -> LoadedDataset {
    let spec = SynthSpec {
        domain: Domain::A,
        task: Task::Seg,
        n,
        image_size: 64,
        num_classes: 2,
        seed: 5,
    };
    let mut records = Vec::new();
    let mut samples = Vec::new();
    for i in offset..offset + n {
        let s = generate_sample(&spec, i);
        let id = format!("a{i:06}");
        let dense = s.mask.expect("segmentation sample");
        let mask = if scribble {
            let params = ScribbleParams {
                seed: 1000 + i as u64,
                ..ScribbleParams::default()
            };
            synthesize_scribbles(&dense, &params).unwrap()
        } else {
            dense
        };
        records.push(Record {
            id: id.clone(),
            image: PathBuf::from(format!("images/{id}.png")),
            mask: Some(PathBuf::from(format!("masks/{id}.png"))),
            label: None,
            labels: None,
        });
        samples.push(LoadedSample {
            id,
            image: s.image,
            mask: Some(mask),
            target: Some(s.target),
        });
    }
    let manifest = DatasetManifest::new(class_names(Domain::A, 2), 255, records, PathBuf::new()).unwrap();
    LoadedDataset::from_samples(manifest, samples).unwrap()
}

fn mean_pixel_accuracy(model: &Model<f32>, test: &LoadedDataset) -> f64 {
    let samples = test.all();
    let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_masks(model, &images).unwrap();
    let accs: Vec<f64> = preds
        .iter()
        .zip(&samples)
        .map(|(p, s)| pixel_accuracy(p, s.mask.as_ref().unwrap()).unwrap())
        .collect();
    accs.iter().sum::<f64>() / accs.len() as f64
}

fn scribble_expansion() -> Verdict {
    let train = two_class_set(64, 0, true);
    let test = two_class_set(32, 10_000, false);
    let coverage = train
        .all()
        .iter()
        .map(|s| s.mask.as_ref().unwrap().labeled_fraction())
        .fold(0.0f64, f64::max);
    let mut accs = Vec::new();
    let mut rises = true;
    for seed in 0..5u64 {
        let text = format!(
            "stage = \"pretrain\"\nsetting = \"scribble_seg\"\nseed = {seed}\nmax_iter = 500\nlog_every = 100\n\n\
             [data]\ntrain_manifest = \"unused\"\n\n[optim]\nlr = 0.01\n\n[augment]\ncrop_size = 64\n"
        );
        let cfg = ExperimentConfig::parse_str(&text, Path::new(".")).unwrap();
        let model_cfg = cfg.model.model_config(2, HeadKind::Segmentation);
        let untrained: Model<f32> = build_model_for(&model_cfg, seed).unwrap();
        let out = pretrain(&cfg, &train).unwrap();
        let trained = Model::from_checkpoint(&model_cfg, &out.checkpoint).unwrap();
        let acc = mean_pixel_accuracy(&trained, &test);
        rises &= acc > mean_pixel_accuracy(&untrained, &test);
        accs.push(acc);
    }
    let mut sorted = accs.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[2];
    let listed: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    (
        median >= 0.90 && coverage <= 0.05,
        format!(
            "500 iters, 64x64, K=2, max scribble coverage {:.2}%; held-out dense accuracy per seed [{}], \
             median {median:.3} (>= 0.90); above untrained: {rises}",
            coverage * 100.0,
            listed.join(", ")
        ),
    )
}

fn transfer_ordering() -> Verdict {
    let dir = common::tempdir();
    let plan = DeskPlan {
        n_c: vec![8],
        ..DeskPlan::default()
    };
    let repro = reproduce(dir.path(), &plan).unwrap();
    let runs: Vec<RunResult> = repro.runs.iter().flat_map(|f| f.runs.clone()).collect();
    let rows = aggregate_all(&runs).unwrap();
    let stat = |s: Setting| {
        let r = rows
            .iter()
            .find(|r| r.method == s && r.n_c == 8)
            .expect("setting present");
        (r.mean_accuracy, r.std_accuracy, r.n_runs)
    };
    let (random, classification, full, scribble) = (
        stat(Setting::Random),
        stat(Setting::Classification),
        stat(Setting::FullSeg),
        stat(Setting::ScribbleSeg),
    );
    let pooled = ((full.1.powi(2) + scribble.1.powi(2)) / 2.0).sqrt();
    let gap = (scribble.0 - full.0).abs();
    let all_five = [random, classification, full, scribble].iter().all(|s| s.2 == 5);
    (
        scribble.0 >= random.0 && full.0 >= random.0 && gap <= pooled && all_five,
        format!(
            "n_c=8, 5 seeds: random {:.3}±{:.3}, classification {:.3}±{:.3}, full {:.3}±{:.3}, scribble {:.3}±{:.3}; \
             |scribble-full| {gap:.3} <= pooled std {pooled:.3}",
            random.0, random.1, classification.0, classification.1, full.0, full.1, scribble.0, scribble.1
        ),
    )
}

fn determinism() -> Verdict {
    let (a, b) = (common::tempdir(), common::tempdir());
    reproduce(a.path(), &DeskPlan::smoke()).unwrap();
    reproduce(b.path(), &DeskPlan::smoke()).unwrap();
    let files = common::files_under(a.path());
    let same_listing = files == common::files_under(b.path());
    let mut differing = Vec::new();
    for f in &files {
        if std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok() {
            differing.push(f.display().to_string());
        }
    }
    let count = |ext: &str| files.iter().filter(|f| f.extension().is_some_and(|e| e == ext)).count();
    (
        same_listing && differing.is_empty() && count("ckpt") > 0,
        format!(
            "two smoke pipelines, {} files ({} checkpoints, {} metric logs, {} reports) compared, {} differ {:?}",
            files.len(),
            count("ckpt"),
            count("jsonl") - files.iter().filter(|f| f.ends_with("manifest.jsonl")).count(),
            files
                .iter()
                .filter(|f| f.file_name().is_some_and(|n| n == "report.md"))
                .count(),
            differing.len(),
            differing
        ),
    )
}

fn labelled_records(per_class: usize, classes: usize) -> DatasetManifest {
    let records = (0..per_class * classes)
        .map(|i| Record {
            id: format!("s{i:05}"),
            image: PathBuf::from(format!("images/s{i:05}.png")),
            mask: None,
            label: Some(i % classes),
            labels: None,
        })
        .collect();
    let names = (0..classes).map(|c| format!("class{c}")).collect();
    DatasetManifest::new(names, 255, records, PathBuf::new()).unwrap()
}

fn splits_and_subsamples() -> Verdict {
    let pool = labelled_records(625, 8);
    let mut shuffled = pool.clone();
    shuffled.records.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let split = kfold_splits(&pool, 10, 42).unwrap();
    let sizes = split.fold_sizes();
    let mut covered = BTreeSet::new();
    let mut disjoint = true;
    for fold in 0..10 {
        for id in split.fold_ids(fold) {
            disjoint &= covered.insert(id.to_string());
        }
    }
    let all_ids: BTreeSet<String> = pool.records.iter().map(|r| r.id.clone()).collect();
    let split_invariant = kfold_splits(&shuffled, 10, 42).unwrap() == split;
    let sub = subsample_per_class(&pool, 12, 42).unwrap();
    let sub_ids = |m: &DatasetManifest| m.records.iter().map(|r| r.id.clone()).collect::<BTreeSet<_>>();
    let sub_invariant = sub_ids(&sub) == sub_ids(&subsample_per_class(&shuffled, 12, 42).unwrap());
    let balanced = (0..8).all(|c| sub.records.iter().filter(|r| r.label == Some(c)).count() == 12);
    (
        sizes.iter().all(|&s| s == 500)
            && disjoint
            && covered == all_ids
            && sub.len() == 96
            && balanced
            && split_invariant
            && sub_invariant,
        format!(
            "5000 records: 10 folds of {:?}, disjoint {disjoint}, cover all {}; n_c=12 x 8 classes -> {} records; \
             order invariant: split {split_invariant}, subsample {sub_invariant}",
            sizes.iter().collect::<BTreeSet<_>>(),
            covered == all_ids,
            sub.len()
        ),
    )
}

fn report_fidelity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut runs = Vec::new();
    for dataset in ["CRC", "ISIC"] {
        for (n_c, r_percent) in [(12, 2.4), (25, 5.0), (50, 10.0)] {
            for setting in Setting::ALL {
                for seed in 0..10 {
                    runs.push(RunResult {
                        seed,
                        setting,
                        dataset: dataset.into(),
                        n_c,
                        r_percent,
                        final_test_accuracy: rng.random_range(0.6..0.95),
                        trace: vec![],
                    });
                }
            }
        }
    }
    let first = emit_results_table(&aggregate_all(&runs).unwrap(), TableFormat::Markdown);
    runs.shuffle(&mut rng);
    let second = emit_results_table(&aggregate_all(&runs).unwrap(), TableFormat::Markdown);
    let order = ["Random", "Classification", "Full Segmentation", "Scribble Segmentation"];
    let body: Vec<Vec<String>> = first
        .lines()
        .filter(|l| l.starts_with("| ") && !l.starts_with("| Initialization"))
        .map(|l| l.split('|').map(|c| c.trim().to_string()).collect())
        .collect();
    let mut blocks_ok = body.len() == 24;
    for (i, cells) in body.iter().enumerate() {
        blocks_ok &= cells[1] == order[i % 4];
        blocks_ok &= (i % 4 == 0) != cells[2].is_empty();
        let (m, s) = cells[4].split_once(" ± ").unwrap_or(("", ""));
        let two_dp = |v: &str| v.split_once('.').is_some_and(|(a, b)| !a.is_empty() && b.len() == 2);
        blocks_ok &= two_dp(m) && two_dp(s);
    }
    let headers = first.matches("### ").count();
    (
        blocks_ok && first == second && headers == 2,
        format!(
            "2 datasets x 3 N_c blocks x 4 methods: {} rows in table order with mean ± std cells: {blocks_ok}; \
             byte-identical re-emission from shuffled runs: {}",
            body.len(),
            first == second
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, "loss gradients", loss_gradients),
        (2, "loss reduction", loss_reduction),
        (3, "schedule exactness", schedules),
        (4, "optimizer oracles", optimizers),
        (5, "scribble expansion", scribble_expansion),
        (6, "transfer ordering", transfer_ordering),
        (7, "determinism", determinism),
        (8, "split/subsample", splits_and_subsamples),
        (9, "report fidelity", report_fidelity),
    ];
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = check();
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {id} ({name}): {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
