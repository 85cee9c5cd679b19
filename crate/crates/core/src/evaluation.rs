//! Accuracy metrics, multi-seed aggregation and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::mask::{LabelMask, IGNORE};
use crate::error::{Error, Result};
use crate::models::Setting;

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::contract("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy over the reference's labeled pixels.
pub fn pixel_accuracy(pred: &LabelMask, reference: &LabelMask) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(Error::contract("prediction and reference masks differ in shape"));
    }
    let mut total = 0usize;
    let mut hits = 0usize;
    for (&p, &r) in pred.data().iter().zip(reference.data()) {
        if r != IGNORE {
            total += 1;
            hits += usize::from(p == r);
        }
    }
    if total == 0 {
        return Err(Error::contract("reference mask has no labeled pixel"));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub eval_accuracy: f64,
}

/// Outcome of one fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub setting: Setting,
    pub dataset: String,
    pub n_c: usize,
    pub r_percent: f64,
    pub final_test_accuracy: f64,
    pub trace: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Setting,
    pub dataset: String,
    pub n_c: usize,
    pub r_percent: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub n_runs: usize,
}

/// Mean and sample (n−1) standard deviation of final accuracies.
pub fn aggregate_mean_std(results: &[RunResult]) -> Result<AggregateRow> {
    let first = results
        .first()
        .ok_or_else(|| Error::contract("cannot aggregate zero results"))?;
    for r in results {
        if r.setting != first.setting
            || r.dataset != first.dataset
            || r.n_c != first.n_c
            || r.r_percent != first.r_percent
        {
            return Err(Error::contract(format!(
                "mixed configurations: ({}, {}, n_c={}) vs ({}, {}, n_c={})",
                first.dataset,
                first.setting.tag(),
                first.n_c,
                r.dataset,
                r.setting.tag(),
                r.n_c
            )));
        }
    }
    let mut acc: Vec<f64> = results.iter().map(|r| r.final_test_accuracy).collect();
    acc.sort_by(f64::total_cmp);
    let (mean, std) = mean_std(&acc);
    Ok(AggregateRow {
        method: first.setting,
        dataset: first.dataset.clone(),
        n_c: first.n_c,
        r_percent: first.r_percent,
        mean_accuracy: mean,
        std_accuracy: std,
        n_runs: results.len(),
    })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let anchor = values[0];
    let mean = anchor + values.iter().map(|v| v - anchor).sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Groups results by (dataset, setting, n_c) and aggregates each group.
pub fn aggregate_all(results: &[RunResult]) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<(String, usize, Setting), Vec<RunResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.dataset.clone(), r.n_c, r.setting))
            .or_default()
            .push(r.clone());
    }
    groups.values().map(|g| aggregate_mean_std(g)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Markdown,
    Json,
}

impl TableFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            "json" => Ok(TableFormat::Json),
            other => Err(Error::contract(format!("unknown table format `{other}`"))),
        }
    }
}

pub const ABSENT: &str = "-";

/// One (dataset, N_c) block with the four methods in table order.
#[derive(Clone, Debug, Serialize)]
struct Block<'a> {
    dataset: &'a str,
    n_c: usize,
    r_percent: Option<f64>,
    methods: Vec<(Setting, Option<&'a AggregateRow>)>,
}

fn blocks(rows: &[AggregateRow]) -> Vec<Block<'_>> {
    let mut keys: Vec<(&str, usize)> = rows.iter().map(|r| (r.dataset.as_str(), r.n_c)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(dataset, n_c)| {
            let in_block: Vec<&AggregateRow> = rows.iter().filter(|r| r.dataset == dataset && r.n_c == n_c).collect();
            Block {
                dataset,
                n_c,
                r_percent: in_block.first().map(|r| r.r_percent),
                methods: Setting::ALL
                    .into_iter()
                    .map(|s| (s, in_block.iter().copied().find(|r| r.method == s)))
                    .collect(),
            }
        })
        .collect()
}

fn pct_cell(row: &AggregateRow) -> String {
    format!("{:.2} ± {:.2}", row.mean_accuracy * 100.0, row.std_accuracy * 100.0)
}

#[derive(Serialize)]
struct JsonRow<'a> {
    dataset: &'a str,
    method: &'static str,
    n_c: usize,
    r_percent: Option<f64>,
    mean_acc: Option<f64>,
    std_acc: Option<f64>,
    n_runs: Option<usize>,
}

/// Renders rows grouped by (dataset, N_c) with methods ordered Random,
/// Classification, Full Segmentation, Scribble Segmentation. Missing
/// methods render as an absent marker (empty fields in CSV, `null` in JSON).
pub fn emit_results_table(rows: &[AggregateRow], format: TableFormat) -> String {
    let blocks = blocks(rows);
    match format {
        TableFormat::Csv => {
            let mut out = String::from("dataset,method,n_c,r_percent,mean_acc,std_acc,n_runs\n");
            for b in &blocks {
                for (s, row) in &b.methods {
                    let r_pct = b.r_percent.map(|v| v.to_string()).unwrap_or_default();
                    match row {
                        Some(r) => writeln!(
                            out,
                            "{},{},{},{},{},{},{}",
                            b.dataset,
                            s.method_name(),
                            b.n_c,
                            r_pct,
                            r.mean_accuracy,
                            r.std_accuracy,
                            r.n_runs
                        ),
                        None => writeln!(out, "{},{},{},{},,,", b.dataset, s.method_name(), b.n_c, r_pct),
                    }
                    .unwrap();
                }
            }
            out
        }
        TableFormat::Markdown => {
            let mut out = String::new();
            let mut datasets: Vec<&str> = blocks.iter().map(|b| b.dataset).collect();
            datasets.dedup();
            for (i, ds) in datasets.iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                writeln!(out, "### {ds}\n").unwrap();
                out.push_str("| Initialization/Method | N_c | R% | Accuracy (%) |\n");
                out.push_str("|:--|--:|--:|--:|\n");
                for b in blocks.iter().filter(|b| b.dataset == *ds) {
                    for (j, (s, row)) in b.methods.iter().enumerate() {
                        let (nc, rp) = if j == 0 {
                            (
                                b.n_c.to_string(),
                                b.r_percent.map(|v| format!("{v:.2}")).unwrap_or_default(),
                            )
                        } else {
                            (String::new(), String::new())
                        };
                        let cell = row.map(pct_cell).unwrap_or_else(|| ABSENT.to_string());
                        writeln!(out, "| {} | {nc} | {rp} | {cell} |", s.method_name()).unwrap();
                    }
                }
            }
            out
        }
        TableFormat::Json => {
            let rows: Vec<JsonRow> = blocks
                .iter()
                .flat_map(|b| {
                    b.methods.iter().map(move |(s, row)| JsonRow {
                        dataset: b.dataset,
                        method: s.method_name(),
                        n_c: b.n_c,
                        r_percent: b.r_percent,
                        mean_acc: row.map(|r| r.mean_accuracy),
                        std_acc: row.map(|r| r.std_accuracy),
                        n_runs: row.map(|r| r.n_runs),
                    })
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&rows).expect("rows serialize");
            s.push('\n');
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mask::MaskKind;
    use rand::{Rng, SeedableRng};

    fn run(setting: Setting, acc: f64) -> RunResult {
        RunResult {
            seed: 0,
            setting,
            dataset: "synth-b".into(),
            n_c: 8,
            r_percent: 2.0,
            final_test_accuracy: acc,
            trace: vec![],
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn accuracy_matches_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let p: Vec<usize> = (0..1000).map(|_| rng.random_range(0..5)).collect();
        let l: Vec<usize> = (0..1000).map(|_| rng.random_range(0..5)).collect();
        let mut hits = 0;
        for i in 0..1000 {
            if p[i] == l[i] {
                hits += 1;
            }
        }
        assert_eq!(accuracy(&p, &l).unwrap(), hits as f64 / 1000.0);
    }

    #[test]
    fn pixel_accuracy_ignores_unlabeled() {
        let pred = LabelMask::filled(3, 3, 2, MaskKind::Dense, 1);
        assert_eq!(pixel_accuracy(&pred, &pred).unwrap(), 1.0);
        let mut reference = LabelMask::filled(3, 3, 2, MaskKind::Scribble, IGNORE);
        reference.set(1, 1, 1);
        assert_eq!(pixel_accuracy(&pred, &reference).unwrap(), 1.0);
        let empty = LabelMask::filled(3, 3, 2, MaskKind::Scribble, IGNORE);
        assert!(pixel_accuracy(&pred, &empty).is_err());
    }

    #[test]
    fn pixel_accuracy_matches_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let gen = |rng: &mut rand_chacha::ChaCha8Rng, ignore: bool| {
            (0..400)
                .map(|_| {
                    if ignore && rng.random_bool(0.3) {
                        IGNORE
                    } else {
                        rng.random_range(0..3)
                    }
                })
                .collect::<Vec<u16>>()
        };
        let p = gen(&mut rng, false);
        let r = gen(&mut rng, true);
        let (mut t, mut h) = (0, 0);
        for i in 0..400 {
            if r[i] != IGNORE {
                t += 1;
                if p[i] == r[i] {
                    h += 1;
                }
            }
        }
        let pm = LabelMask::new(20, 20, 3, MaskKind::Dense, p).unwrap();
        let rm = LabelMask::new(20, 20, 3, MaskKind::Scribble, r).unwrap();
        assert_eq!(pixel_accuracy(&pm, &rm).unwrap(), h as f64 / t as f64);
    }

    #[test]
    fn aggregate_examples() {
        let row = aggregate_mean_std(&[run(Setting::Random, 0.5)]).unwrap();
        assert_eq!((row.mean_accuracy, row.std_accuracy, row.n_runs), (0.5, 0.0, 1));
        let rs = [
            run(Setting::Random, 0.1),
            run(Setting::Random, 0.2),
            run(Setting::Random, 0.3),
        ];
        let row = aggregate_mean_std(&rs).unwrap();
        assert!((row.mean_accuracy - 0.2).abs() < 1e-15);
        assert!((row.std_accuracy - 0.1).abs() < 1e-15);
        let perm = [rs[2].clone(), rs[0].clone(), rs[1].clone()];
        assert_eq!(aggregate_mean_std(&perm).unwrap(), row);
        let same = vec![run(Setting::Random, 0.37); 6];
        let row = aggregate_mean_std(&same).unwrap();
        assert_eq!((row.mean_accuracy, row.std_accuracy), (0.37, 0.0));
    }

    #[test]
    fn aggregate_rejects_mixed_tags() {
        assert!(aggregate_mean_std(&[run(Setting::Random, 0.1), run(Setting::FullSeg, 0.2)]).is_err());
        assert!(aggregate_mean_std(&[]).is_err());
    }

    #[test]
    fn markdown_block_order_and_absent_marker() {
        let rows: Vec<AggregateRow> = [Setting::ScribbleSeg, Setting::Random, Setting::FullSeg]
            .into_iter()
            .map(|s| aggregate_mean_std(&[run(s, 0.6162)]).unwrap())
            .collect();
        let md = emit_results_table(&rows, TableFormat::Markdown);
        let body: Vec<&str> = md
            .lines()
            .filter(|l| l.starts_with("| ") && !l.contains("N_c"))
            .collect();
        assert_eq!(body.len(), 4);
        assert!(body[0].starts_with("| Random | 8 | 2.00 | 61.62 ± 0.00 |"));
        assert!(body[1].starts_with("| Classification |  |  | -"));
        assert!(body[2].starts_with("| Full Segmentation"));
        assert!(body[3].starts_with("| Scribble Segmentation"));
    }
}
