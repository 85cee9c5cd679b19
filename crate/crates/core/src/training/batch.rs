use std::collections::BTreeMap;

use log::warn;

use crate::data::{ClassTarget, DatasetManifest, ImageTensor, LabelMask, MaskKind};
use crate::error::{Error, Result};
use crate::losses::{
    argmax, bce_multilabel_with_grad, masked_seg_loss_with_grad, softmax_ce_with_grad, LogitsMap, Normalization,
};
use crate::models::Model;
use crate::nn::Tensor;

/// One decoded record.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    pub image: ImageTensor,
    pub mask: Option<LabelMask>,
    pub target: Option<ClassTarget>,
}

/// A manifest with every image (and mask) decoded into memory.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    samples: BTreeMap<String, LoadedSample>,
}

impl LoadedDataset {
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let k = manifest.num_classes();
        let mut samples = BTreeMap::new();
        for r in &manifest.records {
            let sample = LoadedSample {
                id: r.id.clone(),
                image: manifest.load_image(r)?,
                mask: manifest.load_mask(r)?,
                target: r.class_target(k),
            };
            samples.insert(r.id.clone(), sample);
        }
        Ok(Self { manifest, samples })
    }

    pub fn from_samples(manifest: DatasetManifest, samples: Vec<LoadedSample>) -> Result<Self> {
        manifest.validate()?;
        let samples: BTreeMap<_, _> = samples.into_iter().map(|s| (s.id.clone(), s)).collect();
        if let Some(r) = manifest.records.iter().find(|r| !samples.contains_key(&r.id)) {
            return Err(Error::contract(format!("no sample for record `{}`", r.id)));
        }
        Ok(Self { manifest, samples })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn get(&self, id: &str) -> Result<&LoadedSample> {
        self.samples
            .get(id)
            .ok_or_else(|| Error::contract(format!("unknown sample id `{id}`")))
    }

    /// Samples of `subset` (a manifest over the same ids) in record order.
    pub fn select(&self, subset: &DatasetManifest) -> Result<Vec<&LoadedSample>> {
        subset.records.iter().map(|r| self.get(&r.id)).collect()
    }

    /// All samples in record order.
    pub fn all(&self) -> Vec<&LoadedSample> {
        self.manifest.records.iter().map(|r| &self.samples[&r.id]).collect()
    }
}

/// Stacks equally sized images into an `N×3×H×W` tensor.
pub fn images_to_batch(images: &[&ImageTensor]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::contract("empty batch"))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.shape() != (h, w) {
            return Err(Error::contract(format!(
                "batch mixes image sizes {:?} and {:?}",
                (h, w),
                img.shape()
            )));
        }
        data.extend(img.to_planar());
    }
    Ok(Tensor::from_vec(images.len(), 3, h, w, data))
}

/// Batch-mean loss with the logits gradient in the network's layout.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub grad: Tensor<f32>,
    /// Images that contributed (all-ignored masks are skipped).
    pub used: usize,
    pub correct: usize,
    pub counted: usize,
}

impl BatchLoss {
    pub fn accuracy(&self) -> Option<f64> {
        (self.counted > 0).then(|| self.correct as f64 / self.counted as f64)
    }
}

/// Mean of per-image masked losses. Images whose mask is entirely ignored
/// contribute neither loss nor gradient.
pub fn seg_batch_loss(logits: &Tensor<f32>, masks: &[&LabelMask], mode: Normalization) -> Result<BatchLoss> {
    let [n, k, h, w] = logits.shape();
    if masks.len() != n {
        return Err(Error::contract(format!("{} masks for {n} logit maps", masks.len())));
    }
    let mut per_image = Vec::with_capacity(n);
    let (mut correct, mut counted) = (0, 0);
    for (i, mask) in masks.iter().enumerate() {
        let map = LogitsMap::from_planar(h, w, k, logits.sample(i))?;
        let (lv, g) = masked_seg_loss_with_grad(&map, mask, mode)?;
        if lv.labeled_count == 0 {
            warn!("skipping image {i} of batch: mask has no labeled pixel");
            per_image.push(None);
            continue;
        }
        for (p, &label) in map.predictions().iter().zip(mask.data()) {
            if label != crate::data::IGNORE {
                counted += 1;
                correct += usize::from(*p == label as usize);
            }
        }
        per_image.push(Some((lv.value, g)));
    }
    let used = per_image.iter().filter(|x| x.is_some()).count();
    let mut grad = Tensor::zeros(n, k, h, w);
    let mut loss = 0.0;
    if used > 0 {
        let inv = 1.0 / used as f64;
        for (i, item) in per_image.into_iter().enumerate() {
            let Some((v, g)) = item else { continue };
            loss += v * inv;
            let out = grad.sample_mut(i);
            for p in 0..h * w {
                for c in 0..k {
                    out[c * h * w + p] = (g[p * k + c] * inv) as f32;
                }
            }
        }
    }
    Ok(BatchLoss {
        loss,
        grad,
        used,
        correct,
        counted,
    })
}

fn flat_logits(logits: &Tensor<f32>) -> Result<(usize, usize)> {
    let [n, k, h, w] = logits.shape();
    if h != 1 || w != 1 {
        return Err(Error::contract("classification logits must be N×K×1×1"));
    }
    Ok((n, k))
}

/// Batch-mean multi-label binary cross-entropy.
pub fn bce_batch_loss(logits: &Tensor<f32>, targets: &[&ClassTarget]) -> Result<BatchLoss> {
    let (n, k) = flat_logits(logits)?;
    if targets.len() != n {
        return Err(Error::contract(format!("{} targets for {n} logit rows", targets.len())));
    }
    let mut grad = Tensor::zeros(n, k, 1, 1);
    let mut loss = 0.0;
    let (mut correct, mut counted) = (0, 0);
    for (i, t) in targets.iter().enumerate() {
        let z: Vec<f64> = logits.sample(i).iter().map(|&v| v as f64).collect();
        let (v, g) = bce_multilabel_with_grad(&z, t)?;
        loss += v / n as f64;
        for (o, gi) in grad.sample_mut(i).iter_mut().zip(&g) {
            *o = (gi / n as f64) as f32;
        }
        for (zi, ti) in z.iter().zip(t.to_multi_hot(k)) {
            counted += 1;
            correct += usize::from((*zi > 0.0) == (ti > 0.5));
        }
    }
    Ok(BatchLoss {
        loss,
        grad,
        used: n,
        correct,
        counted,
    })
}

/// Batch-mean softmax cross-entropy against single labels.
pub fn ce_batch_loss(logits: &Tensor<f32>, labels: &[usize]) -> Result<BatchLoss> {
    let (n, k) = flat_logits(logits)?;
    if labels.len() != n {
        return Err(Error::contract(format!("{} labels for {n} logit rows", labels.len())));
    }
    let mut grad = Tensor::zeros(n, k, 1, 1);
    let mut loss = 0.0;
    let mut correct = 0;
    let mut g = vec![0.0; k];
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::contract(format!("label {label} outside {k} classes")));
        }
        let z: Vec<f64> = logits.sample(i).iter().map(|&v| v as f64).collect();
        loss += softmax_ce_with_grad(&z, label, 1.0 / n as f64, &mut g) / n as f64;
        for (o, gi) in grad.sample_mut(i).iter_mut().zip(&g) {
            *o = *gi as f32;
        }
        correct += usize::from(argmax(&z) == label);
    }
    Ok(BatchLoss {
        loss,
        grad,
        used: n,
        correct,
        counted: n,
    })
}

const INFER_CHUNK: usize = 32;

/// Arg-max class per image, evaluated with running statistics.
pub fn predict_classes(model: &Model<f32>, images: &[&ImageTensor]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_CHUNK) {
        let logits = model.infer(&images_to_batch(chunk)?);
        for i in 0..chunk.len() {
            let z: Vec<f64> = logits.sample(i).iter().map(|&v| v as f64).collect();
            out.push(argmax(&z));
        }
    }
    Ok(out)
}

/// Dense arg-max masks, evaluated with running statistics.
pub fn predict_masks(model: &Model<f32>, images: &[&ImageTensor]) -> Result<Vec<LabelMask>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_CHUNK) {
        let logits = model.infer(&images_to_batch(chunk)?);
        let [_, k, h, w] = logits.shape();
        for i in 0..chunk.len() {
            let map = LogitsMap::from_planar(h, w, k, logits.sample(i))?;
            let data = map.predictions().into_iter().map(|p| p as u16).collect();
            out.push(LabelMask::new(h, w, k, MaskKind::Dense, data)?);
        }
    }
    Ok(out)
}
