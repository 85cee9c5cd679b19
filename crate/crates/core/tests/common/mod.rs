#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::Rng;
use scribble_transfer::data::{LabelMask, MaskKind, IGNORE};
use scribble_transfer::losses::LogitsMap;

pub fn oracle(name: &str) -> serde_json::Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn num(v: &serde_json::Value) -> f64 {
    match v {
        serde_json::Value::String(s) => s.parse().unwrap(),
        other => other.as_f64().unwrap(),
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

pub fn random_logits<R: Rng>(h: usize, w: usize, k: usize, rng: &mut R) -> LogitsMap {
    let data = (0..h * w * k).map(|_| rng.random_range(-4.0..4.0)).collect();
    LogitsMap::new(h, w, k, data).unwrap()
}

/// Random mask with roughly `ignore_p` ignored pixels.
pub fn random_mask<R: Rng>(h: usize, w: usize, k: usize, ignore_p: f64, rng: &mut R) -> LabelMask {
    let data = (0..h * w)
        .map(|_| {
            if rng.random_bool(ignore_p) {
                IGNORE
            } else {
                rng.random_range(0..k) as u16
            }
        })
        .collect();
    let kind = if ignore_p > 0.0 {
        MaskKind::Scribble
    } else {
        MaskKind::Dense
    };
    LabelMask::new(h, w, k, kind, data).unwrap()
}

pub fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

pub fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn scaled_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

/// Largest scaled deviation of both lr schedules from the high-precision table,
/// with the number of points compared.
pub fn schedule_oracle_error() -> (f64, usize) {
    use scribble_transfer::training::{exp_lr, poly_lr};
    let table = oracle("schedules.json");
    let mut worst = 0.0f64;
    let mut n = 0;
    for p in table["poly"].as_array().unwrap() {
        let got = poly_lr(
            p["iter"].as_u64().unwrap(),
            p["max_iter"].as_u64().unwrap(),
            num(&p["base_lr"]),
            num(&p["power"]),
        )
        .unwrap();
        worst = worst.max(rel_err(got, num(&p["value"])).min(scaled_err(got, num(&p["value"]))));
        n += 1;
    }
    for p in table["exp"].as_array().unwrap() {
        let got = exp_lr(p["epoch"].as_u64().unwrap(), num(&p["base_lr"]), num(&p["factor"]));
        worst = worst.max(rel_err(got, num(&p["value"])).min(scaled_err(got, num(&p["value"]))));
        n += 1;
    }
    (worst, n)
}

/// Largest scaled deviation of 1-d SGD and Adam trajectories on a quadratic
/// from the high-precision table, with the number of steps compared.
pub fn optimizer_oracle_error() -> (f64, usize) {
    use scribble_transfer::training::{adam_update, sgd_update, AdamParams};
    let table = oracle("optimizers.json");
    let mut worst = 0.0f64;
    let mut n = 0;
    for case in table["sgd"].as_array().unwrap() {
        let (a, c) = (num(&case["a"]), num(&case["c"]));
        let (mut theta, mut vel) = ([num(&case["theta0"])], [0.0]);
        for want in case["trajectory"].as_array().unwrap() {
            let g = [a * (theta[0] - c)];
            sgd_update(
                &mut theta,
                &g,
                &mut vel,
                num(&case["lr"]),
                num(&case["momentum"]),
                num(&case["weight_decay"]),
            );
            worst = worst.max(scaled_err(theta[0], num(want)));
            n += 1;
        }
    }
    for case in table["adam"].as_array().unwrap() {
        let (a, c) = (num(&case["a"]), num(&case["c"]));
        let hp = AdamParams {
            beta1: num(&case["beta1"]),
            beta2: num(&case["beta2"]),
            eps: num(&case["eps"]),
        };
        let (mut theta, mut m, mut v) = ([num(&case["theta0"])], [0.0], [0.0]);
        for (step, want) in case["trajectory"].as_array().unwrap().iter().enumerate() {
            let g = [a * (theta[0] - c)];
            adam_update(&mut theta, &g, &mut m, &mut v, step as u64 + 1, num(&case["lr"]), &hp);
            worst = worst.max(scaled_err(theta[0], num(want)));
            n += 1;
        }
    }
    (worst, n)
}

/// Small source/target datasets on disk plus config builders pointing at them.
pub struct Desk {
    pub dir: tempfile::TempDir,
}

impl Desk {
    pub fn new(image_size: usize) -> Self {
        use scribble_transfer::data::{
            generate_synthetic_dataset, scribble_dataset, Domain, ScribbleParams, SynthSpec, Task,
        };
        let dir = tempdir();
        let root = dir.path();
        let spec = |domain, task, n, num_classes, seed| SynthSpec {
            domain,
            task,
            n,
            image_size,
            num_classes,
            seed,
        };
        let a = generate_synthetic_dataset(&spec(Domain::A, Task::Seg, 16, 3, 5), &root.join("a")).unwrap();
        scribble_dataset(
            &a,
            &ScribbleParams {
                seed: 5,
                ..Default::default()
            },
            &root.join("a_scribble"),
        )
        .unwrap();
        generate_synthetic_dataset(&spec(Domain::B, Task::Cls, 24, 3, 5), &root.join("b_train")).unwrap();
        generate_synthetic_dataset(&spec(Domain::B, Task::Cls, 12, 3, 6), &root.join("b_test")).unwrap();
        std::fs::create_dir_all(root.join("configs")).unwrap();
        Self { dir }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn pretrain_toml(&self, setting: &str, max_iter: u64, lr: f64) -> String {
        let source = if setting == "scribble_seg" { "a_scribble" } else { "a" };
        format!(
            "stage = \"pretrain\"\nsetting = \"{setting}\"\nseed = 3\nmax_iter = {max_iter}\nbatch_size = 4\nlog_every = 1\n\n\
             [data]\ntrain_manifest = \"../{source}/manifest.jsonl\"\n\n\
             [model]\npreset = \"tiny\"\n\n[optim]\nlr = {lr:?}\n\n[augment]\ncrop_size = 24\n"
        )
    }

    pub fn finetune_toml(&self, epochs: u64, n_seeds: usize) -> String {
        format!(
            "stage = \"finetune\"\nseed = 9\nepochs = {epochs}\nbatch_size = 4\nn_seeds = {n_seeds}\neval_every = 1\n\n\
             [data]\ntrain_manifest = \"../b_train/manifest.jsonl\"\ntest_manifest = \"../b_test/manifest.jsonl\"\nn_c = 4\n\n\
             [model]\npreset = \"tiny\"\n\n[optim]\nlr = 1e-3\n"
        )
    }

    pub fn config(&self, text: &str) -> scribble_transfer::config::ExperimentConfig {
        scribble_transfer::config::ExperimentConfig::parse_str(text, &self.root().join("configs")).unwrap()
    }

    pub fn write_config(&self, name: &str, text: &str) -> PathBuf {
        let path = self.root().join("configs").join(name);
        std::fs::write(&path, text).unwrap();
        path
    }
}
