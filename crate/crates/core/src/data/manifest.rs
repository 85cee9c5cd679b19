//! Line-delimited dataset manifests and sample file I/O.
//!
//! The first line is a header object carrying `class_names` and
//! `ignore_value_on_disk`; every following line is one record
//! `{id, image, mask?, label?, labels?}`. Paths are relative to the
//! manifest's directory. Class indices in records are zero-based.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use super::mask::{ClassTarget, Label, LabelMask, MaskKind, IGNORE};
use crate::error::{Error, Result};

pub const DEFAULT_IGNORE_ON_DISK: u8 = 255;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub class_names: Vec<String>,
    #[serde(default = "default_ignore")]
    pub ignore_value_on_disk: u8,
}

fn default_ignore() -> u8 {
    DEFAULT_IGNORE_ON_DISK
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

impl Record {
    /// Image-level target, preferring the single label.
    pub fn class_target(&self, num_classes: usize) -> Option<ClassTarget> {
        if let Some(l) = self.label {
            return Some(ClassTarget::Single(l));
        }
        self.labels.as_ref().map(|ls| {
            let mut bits = vec![false; num_classes];
            for &l in ls {
                bits[l] = true;
            }
            ClassTarget::Multi(bits)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub ignore_value_on_disk: u8,
    pub records: Vec<Record>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(
        class_names: Vec<String>,
        ignore_value_on_disk: u8,
        records: Vec<Record>,
        root: PathBuf,
    ) -> Result<Self> {
        let m = Self {
            class_names,
            ignore_value_on_disk,
            records,
            root,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Same header and root with a different record list.
    pub fn with_records(&self, records: Vec<Record>) -> Self {
        Self {
            class_names: self.class_names.clone(),
            ignore_value_on_disk: self.ignore_value_on_disk,
            records,
            root: self.root.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::Manifest {
            path: self.root.clone(),
            message,
        };
        let k = self.num_classes();
        if k < 2 {
            return Err(bad(format!("need at least 2 classes, found {k}")));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(bad(format!("duplicate sample id `{}`", r.id)));
            }
            if r.mask.is_none() && r.label.is_none() && r.labels.is_none() {
                return Err(bad(format!("record `{}` has no supervision source", r.id)));
            }
            let labels = r.label.iter().chain(r.labels.iter().flatten());
            for &l in labels {
                if l >= k {
                    return Err(bad(format!("record `{}` has class {l} outside [0, {k})", r.id)));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.root.join(rel)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            message,
        };
        let mut lines = BufReader::new(file).lines();
        let header_line = loop {
            match lines.next() {
                Some(line) => {
                    let line = line.map_err(|e| Error::io(path, e))?;
                    if !line.trim().is_empty() {
                        break line;
                    }
                }
                None => return Err(bad("missing header line".into())),
            }
        };
        let header: ManifestHeader = serde_json::from_str(&header_line).map_err(|e| bad(format!("header: {e}")))?;
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self {
            class_names: header.class_names,
            ignore_value_on_disk: header.ignore_value_on_disk,
            records,
            root,
        };
        m.validate().map_err(|e| match e {
            Error::Manifest { message, .. } => bad(message),
            other => other,
        })?;
        Ok(m)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = ManifestHeader {
            class_names: self.class_names.clone(),
            ignore_value_on_disk: self.ignore_value_on_disk,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_image(&self, record: &Record) -> Result<ImageTensor> {
        load_rgb_image(&self.resolve(&record.image))
    }

    pub fn load_mask(&self, record: &Record) -> Result<Option<LabelMask>> {
        match &record.mask {
            Some(p) => load_indexed_mask(&self.resolve(p), self).map(Some),
            None => Ok(None),
        }
    }
}

/// Maps one on-disk value to an internal label. Values below the ignore
/// value keep their index, values above it shift down by one, so `0` as the
/// ignore value yields the 1-based → 0-based remap.
pub fn decode_label(value: u8, ignore: u8, num_classes: usize) -> Option<Label> {
    if value == ignore {
        return Some(IGNORE);
    }
    let class = if value < ignore { value } else { value - 1 } as usize;
    (class < num_classes).then_some(class as Label)
}

pub fn encode_label(label: Label, ignore: u8) -> u8 {
    if label == IGNORE {
        ignore
    } else if label < Label::from(ignore) {
        label as u8
    } else {
        (label + 1) as u8
    }
}

pub fn decode_indexed_mask(
    values: &[u8],
    height: usize,
    width: usize,
    num_classes: usize,
    ignore: u8,
    kind: MaskKind,
) -> Result<LabelMask> {
    if values.len() != height * width {
        return Err(Error::contract("mask buffer size does not match its dimensions"));
    }
    let mut data = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        match decode_label(v, ignore, num_classes) {
            Some(l) => data.push(l),
            None => {
                return Err(Error::MalformedMask {
                    value: u32::from(v),
                    row: i / width,
                    col: i % width,
                })
            }
        }
    }
    LabelMask::new(height, width, num_classes, kind, data)
}

/// Reads an 8-bit single-channel mask and remaps it to internal labels.
/// A mask with ignored pixels is tagged as a scribble mask.
pub fn load_indexed_mask(path: &Path, manifest: &DatasetManifest) -> Result<LabelMask> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: format!("mask must be 8-bit single-channel, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    let raw = gray.into_raw();
    let kind = if raw.contains(&manifest.ignore_value_on_disk) {
        MaskKind::Scribble
    } else {
        MaskKind::Dense
    };
    decode_indexed_mask(
        &raw,
        h as usize,
        w as usize,
        manifest.num_classes(),
        manifest.ignore_value_on_disk,
        kind,
    )
    .map_err(|e| match e {
        Error::MalformedMask { value, row, col } => Error::Manifest {
            path: path.to_path_buf(),
            message: format!("malformed mask: unknown value {value} at (row {row}, col {col})"),
        },
        other => other,
    })
}

pub fn save_indexed_mask(path: &Path, mask: &LabelMask, ignore: u8) -> Result<()> {
    let raw: Vec<u8> = mask.data().iter().map(|&l| encode_label(l, ignore)).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("buffer sized from mask dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

pub fn load_rgb_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageTensor::from_rgb8(h as usize, w as usize, rgb.as_raw())
}

pub fn save_rgb_image(path: &Path, image: &ImageTensor) -> Result<()> {
    let img = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .expect("buffer sized from image dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}
