use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Label = u16;

/// Internal ignore sentinel. Never a valid class index.
pub const IGNORE: Label = Label::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Dense,
    Scribble,
}

/// Per-pixel class indices in `[0, K)` or [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    num_classes: usize,
    kind: MaskKind,
    data: Vec<Label>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, num_classes: usize, kind: MaskKind, data: Vec<Label>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("mask dimensions must be at least 1×1"));
        }
        if num_classes < 1 || num_classes >= IGNORE as usize {
            return Err(Error::contract(format!("unsupported class count {num_classes}")));
        }
        if data.len() != height * width {
            return Err(Error::contract(format!(
                "mask buffer has {} values, expected {height}×{width}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v != IGNORE && v as usize >= num_classes) {
            return Err(Error::MalformedMask {
                value: u32::from(data[pos]),
                row: pos / width,
                col: pos % width,
            });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            kind,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, kind: MaskKind, value: Label) -> Self {
        Self {
            height,
            width,
            num_classes,
            kind,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: MaskKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn data(&self) -> &[Label] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Label {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: Label) {
        debug_assert!(v == IGNORE || (v as usize) < self.num_classes);
        self.data[row * self.width + col] = v;
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE).count()
    }

    pub fn labeled_fraction(&self) -> f64 {
        self.labeled_count() as f64 / self.data.len() as f64
    }

    /// Pixel count per class (ignored pixels excluded).
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &v in &self.data {
            if v != IGNORE {
                h[v as usize] += 1;
            }
        }
        h
    }
}

/// Image-level supervision.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTarget {
    Single(usize),
    Multi(Vec<bool>),
}

impl ClassTarget {
    pub fn as_single(&self) -> Option<usize> {
        match self {
            ClassTarget::Single(c) => Some(*c),
            ClassTarget::Multi(_) => None,
        }
    }

    /// Dense 0/1 vector of length `k`.
    pub fn to_multi_hot(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; k];
        match self {
            ClassTarget::Single(c) => out[*c] = 1.0,
            ClassTarget::Multi(bits) => {
                for (o, &b) in out.iter_mut().zip(bits) {
                    *o = if b { 1.0 } else { 0.0 };
                }
            }
        }
        out
    }
}

/// Multi-label presence vector: bit `k` is set iff class `k` occupies a
/// labeled pixel. `exclude_background` clears bit 0.
pub fn derive_multilabel_target(mask: &LabelMask, exclude_background: bool) -> Result<ClassTarget> {
    let hist = mask.class_histogram();
    if hist.iter().all(|&c| c == 0) {
        return Err(Error::EmptySupervision);
    }
    let mut bits: Vec<bool> = hist.iter().map(|&c| c > 0).collect();
    if exclude_background {
        bits[0] = false;
    }
    Ok(ClassTarget::Multi(bits))
}
