//! Masked 2D cross-entropy and multi-label binary cross-entropy.
//!
//! All losses are evaluated in double precision and come with analytic
//! gradients. Ignored pixels contribute neither loss nor gradient; their
//! gradient entries are exactly zero.

use serde::{Deserialize, Serialize};

use crate::data::mask::{ClassTarget, LabelMask, IGNORE};
use crate::error::{Error, Result};

/// Per-pixel scores laid out `H × W × K`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<f64>,
}

impl LogitsMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::contract("logits need at least 2 classes"));
        }
        if data.len() != height * width * num_classes {
            return Err(Error::contract(format!(
                "logits buffer has {} values, expected {height}×{width}×{num_classes}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("logits contain non-finite values"));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    /// Builds from a planar `K × H × W` buffer (network output layout).
    pub fn from_planar<T: Copy + Into<f64>>(
        height: usize,
        width: usize,
        num_classes: usize,
        planar: &[T],
    ) -> Result<Self> {
        let hw = height * width;
        if planar.len() != hw * num_classes {
            return Err(Error::contract("planar logits have the wrong size"));
        }
        let mut data = vec![0.0; planar.len()];
        for k in 0..num_classes {
            for p in 0..hw {
                data[p * num_classes + k] = planar[k * hw + p].into();
            }
        }
        Self::new(height, width, num_classes, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.num_classes;
        &self.data[i..i + self.num_classes]
    }

    /// Arg-max class per pixel.
    pub fn predictions(&self) -> Vec<usize> {
        self.data.chunks(self.num_classes).map(argmax).collect()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Normalisation of the summed per-pixel cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the number of labeled pixels.
    #[default]
    Labeled,
    /// Divide by all `I·J` pixels.
    #[serde(alias = "paper")]
    AllPixels,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub labeled_count: usize,
}

fn log_sum_exp(logits: &[f64]) -> (f64, f64) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    (m, s)
}

/// `−log softmax(logits)[label]`, max-subtracted.
pub fn softmax_ce_pixel(logits: &[f64], label: usize) -> f64 {
    let (m, s) = log_sum_exp(logits);
    (m + s.ln() - logits[label]).max(0.0)
}

/// Cross-entropy and its gradient `softmax − onehot`, scaled by `scale`
/// and written into `grad`.
pub fn softmax_ce_with_grad(logits: &[f64], label: usize, scale: f64, grad: &mut [f64]) -> f64 {
    let (m, s) = log_sum_exp(logits);
    for (g, &z) in grad.iter_mut().zip(logits) {
        *g = scale * ((z - m).exp() / s);
    }
    grad[label] -= scale;
    (m + s.ln() - logits[label]).max(0.0)
}

fn check_shapes(logits: &LogitsMap, mask: &LabelMask) -> Result<()> {
    if logits.shape() != mask.shape() {
        return Err(Error::contract(format!(
            "logits {:?} and mask {:?} differ in shape",
            logits.shape(),
            mask.shape()
        )));
    }
    if logits.num_classes != mask.num_classes() {
        return Err(Error::contract(format!(
            "logits have {} classes, mask declares {}",
            logits.num_classes,
            mask.num_classes()
        )));
    }
    Ok(())
}

fn denominator(mode: Normalization, labeled: usize, total: usize) -> f64 {
    match mode {
        Normalization::Labeled => labeled as f64,
        Normalization::AllPixels => total as f64,
    }
}

/// Sum of per-pixel cross-entropy over labeled pixels, normalised per `mode`.
/// An all-ignored mask gives `0` with `labeled_count = 0`.
pub fn masked_seg_loss(logits: &LogitsMap, mask: &LabelMask, mode: Normalization) -> Result<LossValue> {
    check_shapes(logits, mask)?;
    let k = logits.num_classes;
    let mut sum = 0.0;
    let mut labeled = 0;
    for (p, &label) in mask.data().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        labeled += 1;
        sum += softmax_ce_pixel(&logits.data[p * k..(p + 1) * k], label as usize);
    }
    if labeled == 0 {
        return Ok(LossValue {
            value: 0.0,
            labeled_count: 0,
        });
    }
    Ok(LossValue {
        value: sum / denominator(mode, labeled, mask.data().len()),
        labeled_count: labeled,
    })
}

/// Loss plus `∂loss/∂logits` in the `H × W × K` layout.
pub fn masked_seg_loss_with_grad(
    logits: &LogitsMap,
    mask: &LabelMask,
    mode: Normalization,
) -> Result<(LossValue, Vec<f64>)> {
    check_shapes(logits, mask)?;
    let k = logits.num_classes;
    let labeled = mask.labeled_count();
    let mut grad = vec![0.0; logits.data.len()];
    if labeled == 0 {
        return Ok((
            LossValue {
                value: 0.0,
                labeled_count: 0,
            },
            grad,
        ));
    }
    let denom = denominator(mode, labeled, mask.data().len());
    let scale = 1.0 / denom;
    let mut sum = 0.0;
    for (p, &label) in mask.data().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let r = p * k..(p + 1) * k;
        sum += softmax_ce_with_grad(&logits.data[r.clone()], label as usize, scale, &mut grad[r]);
    }
    Ok((
        LossValue {
            value: sum / denom,
            labeled_count: labeled,
        },
        grad,
    ))
}

fn multi_hot(logits: &[f64], target: &ClassTarget) -> Result<Vec<f64>> {
    let t = match target {
        ClassTarget::Multi(bits) if bits.len() == logits.len() => target.to_multi_hot(bits.len()),
        ClassTarget::Multi(bits) => {
            return Err(Error::contract(format!(
                "target has {} entries, logits have {}",
                bits.len(),
                logits.len()
            )))
        }
        ClassTarget::Single(_) => return Err(Error::contract("binary cross-entropy needs a multi-label target")),
    };
    Ok(t)
}

/// Mean over classes of the per-class binary cross-entropy, using
/// `max(z, 0) − z·t + log(1 + e^{−|z|})`.
pub fn bce_multilabel(logits: &[f64], target: &ClassTarget) -> Result<f64> {
    let t = multi_hot(logits, target)?;
    let k = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(&t)
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / k)
}

pub fn bce_multilabel_with_grad(logits: &[f64], target: &ClassTarget) -> Result<(f64, Vec<f64>)> {
    let value = bce_multilabel(logits, target)?;
    let t = multi_hot(logits, target)?;
    let k = logits.len() as f64;
    let grad = logits.iter().zip(&t).map(|(&z, &t)| (sigmoid(z) - t) / k).collect();
    Ok((value, grad))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mask::MaskKind;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_two_class_pixel() {
        assert_relative_eq!(
            softmax_ce_pixel(&[0.0, 0.0], 0),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn dominant_logit_does_not_overflow() {
        let v = softmax_ce_pixel(&[1000.0, 0.0], 0);
        assert!(v.is_finite() && v < 1e-12);
        let v = softmax_ce_pixel(&[1000.0, 0.0], 1);
        assert_relative_eq!(v, 1000.0, max_relative = 1e-12);
    }

    #[test]
    fn uniform_twenty_one_classes() {
        for label in [0, 7, 20] {
            assert_relative_eq!(softmax_ce_pixel(&[0.3; 21], label), 21f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn one_labeled_pixel_both_modes() {
        let logits = LogitsMap::new(1, 2, 2, vec![0.0; 4]).unwrap();
        let mask = LabelMask::new(1, 2, 2, MaskKind::Scribble, vec![0, IGNORE]).unwrap();
        let l = masked_seg_loss(&logits, &mask, Normalization::Labeled).unwrap();
        assert_relative_eq!(l.value, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(l.labeled_count, 1);
        let p = masked_seg_loss(&logits, &mask, Normalization::AllPixels).unwrap();
        assert_relative_eq!(p.value, std::f64::consts::LN_2 / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn all_ignored_is_zero() {
        let logits = LogitsMap::new(2, 2, 3, (0..12).map(f64::from).collect()).unwrap();
        let mask = LabelMask::filled(2, 2, 3, MaskKind::Scribble, IGNORE);
        for mode in [Normalization::Labeled, Normalization::AllPixels] {
            let (l, g) = masked_seg_loss_with_grad(&logits, &mask, mode).unwrap();
            assert_eq!(
                l,
                LossValue {
                    value: 0.0,
                    labeled_count: 0
                }
            );
            assert!(g.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let logits = LogitsMap::new(2, 2, 2, vec![0.0; 8]).unwrap();
        let mask = LabelMask::filled(2, 3, 2, MaskKind::Dense, 0);
        assert!(matches!(
            masked_seg_loss(&logits, &mask, Normalization::Labeled),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bce_anchor_values() {
        let t = ClassTarget::Multi(vec![true, false, true]);
        assert_relative_eq!(
            bce_multilabel(&[0.0; 3], &t).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        let t = ClassTarget::Multi(vec![true, false]);
        let v = bce_multilabel(&[1000.0, -1000.0], &t).unwrap();
        assert!(v.is_finite() && v < 1e-12);
        assert!(bce_multilabel(&[0.0; 2], &ClassTarget::Single(0)).is_err());
    }
}
