//! Low-data subsampling and cross-validation splits.
//!
//! Both operations sort by sample id before drawing, so the result depends
//! only on the id set and the seed, never on input order.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Record};
use crate::error::{Error, Result};
use crate::seed::{rng, Purpose};

/// Exactly `n_c` records per class, drawn uniformly without replacement.
pub fn subsample_per_class(manifest: &DatasetManifest, n_c: usize, seed: u64) -> Result<DatasetManifest> {
    let k = manifest.num_classes();
    let mut by_class: Vec<Vec<&Record>> = vec![Vec::new(); k];
    for r in &manifest.records {
        let class = r.label.ok_or_else(|| {
            Error::contract(format!(
                "record `{}` is not single-label; cannot subsample per class",
                r.id
            ))
        })?;
        by_class[class].push(r);
    }
    let mut out = Vec::with_capacity(n_c * k);
    for (class, mut recs) in by_class.into_iter().enumerate() {
        if recs.len() < n_c {
            return Err(Error::InsufficientData {
                class,
                available: recs.len(),
                requested: n_c,
            });
        }
        recs.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = rng(seed, Purpose::Subsample, &[class as u64]);
        recs.shuffle(&mut rng);
        out.extend(recs.into_iter().take(n_c).cloned());
    }
    Ok(manifest.with_records(out))
}

/// Fold assignment for every sample id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub k: usize,
    pub fold_assignments: BTreeMap<String, usize>,
}

impl SplitSpec {
    pub fn fold_ids(&self, fold: usize) -> Vec<&str> {
        self.fold_assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.fold_assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// (train, test) manifests for one fold.
    pub fn partition(&self, manifest: &DatasetManifest, fold: usize) -> (DatasetManifest, DatasetManifest) {
        let (test, train): (Vec<Record>, Vec<Record>) = manifest
            .records
            .iter()
            .cloned()
            .partition(|r| self.fold_assignments.get(&r.id) == Some(&fold));
        (manifest.with_records(train), manifest.with_records(test))
    }
}

pub fn kfold_splits(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<SplitSpec> {
    if k < 2 {
        return Err(Error::InvalidSplit(format!("need k ≥ 2, got {k}")));
    }
    if k > manifest.len() {
        return Err(Error::InvalidSplit(format!(
            "k = {k} exceeds dataset size {}",
            manifest.len()
        )));
    }
    let mut ids: Vec<&str> = manifest.records.iter().map(|r| r.id.as_str()).collect();
    ids.sort_unstable();
    ids.shuffle(&mut rng(seed, Purpose::Split, &[k as u64]));
    let fold_assignments = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(SplitSpec { k, fold_assignments })
}
