//! Line-delimited metrics log.
//!
//! The first line identifies the run (`config_hash`, `master_seed`,
//! `stage`); every later line is one `{iter|epoch, split, metric, value}`
//! record. No timestamps are written, so identical runs give identical logs.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Iter(u64),
    Epoch { seed: u64, fold: Option<usize>, epoch: u64 },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    lines: Vec<String>,
}

impl MetricsLog {
    pub fn new(config_hash: &str, master_seed: u64, stage: &str) -> Self {
        let header = json!({ "config_hash": config_hash, "master_seed": master_seed, "stage": stage });
        Self {
            lines: vec![header.to_string()],
        }
    }

    /// A log that records nothing beyond its records (no header).
    pub fn detached() -> Self {
        Self::default()
    }

    pub fn record(&mut self, step: Step, split: &str, metric: &str, value: f64) {
        let mut v = match step {
            Step::Iter(i) => json!({ "iter": i }),
            Step::Epoch { seed, fold, epoch } => {
                let mut v = json!({ "seed": seed, "epoch": epoch });
                if let Some(f) = fold {
                    v["fold"] = json!(f);
                }
                v
            }
        };
        v["split"] = json!(split);
        v["metric"] = json!(metric);
        v["value"] = if value.is_finite() { json!(value) } else { Value::Null };
        self.lines.push(v.to_string());
    }

    pub fn extend(&mut self, other: &MetricsLog) {
        self.lines.extend(other.lines.iter().cloned());
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    /// Records without the header line.
    pub fn records(&self) -> impl Iterator<Item = Value> + '_ {
        self.lines
            .iter()
            .filter_map(|l| serde_json::from_str::<Value>(l).ok())
            .filter(|v| v.get("metric").is_some())
    }

    /// Values of one metric in log order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        self.records()
            .filter(|v| v["split"] == split && v["metric"] == metric)
            .filter_map(|v| v["value"].as_f64())
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}
