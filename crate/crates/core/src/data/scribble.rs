//! Synthetic scribble annotations derived from dense masks.
//!
//! For every connected region large enough to matter, a random monotone
//! polyline is drawn through points of the region's eroded interior and
//! stamped with a square brush clipped to the region. If the strokes exceed
//! the coverage budget, every stroke is truncated by the same ratio while
//! each qualifying class keeps at least one pixel.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mask::{Label, LabelMask, MaskKind, IGNORE};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, id_key, rng_from_seed, Purpose};

use super::manifest::{save_indexed_mask, DatasetManifest, Record};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScribbleParams {
    pub stroke_width: usize,
    pub coverage_budget: f64,
    pub min_region_area: usize,
    pub seed: u64,
}

impl Default for ScribbleParams {
    fn default() -> Self {
        Self {
            stroke_width: 3,
            coverage_budget: 0.05,
            min_region_area: 16,
            seed: 0,
        }
    }
}

impl ScribbleParams {
    pub fn validate(&self) -> Result<()> {
        if self.stroke_width < 1 {
            return Err(Error::contract("stroke_width must be at least 1"));
        }
        if !(self.coverage_budget > 0.0 && self.coverage_budget <= 1.0) {
            return Err(Error::contract("coverage_budget must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// A 4-connected set of same-label pixels, stored as flat indices.
#[derive(Debug)]
pub struct Region {
    pub label: Label,
    pub pixels: Vec<usize>,
}

pub fn connected_regions(mask: &LabelMask) -> Vec<Region> {
    let (h, w) = mask.shape();
    let data = mask.data();
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || data[start] == IGNORE {
            continue;
        }
        let label = data[start];
        let mut pixels = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && data[q] == label {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        pixels.sort_unstable();
        regions.push(Region { label, pixels });
    }
    regions
}

/// Chessboard distance from each region pixel to the nearest pixel outside
/// the region (the image border counts as outside). Zero outside.
fn inner_distance(member: &[bool], h: usize, w: usize) -> Vec<u32> {
    let inf = u32::MAX / 2;
    let mut d: Vec<u32> = member.iter().map(|&m| if m { inf } else { 0 }).collect();
    let at = |d: &Vec<u32>, y: i64, x: i64| -> u32 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0
        } else {
            d[y as usize * w + x as usize]
        }
    };
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            if d[i] == 0 {
                continue;
            }
            let m = [
                at(&d, y - 1, x - 1),
                at(&d, y - 1, x),
                at(&d, y - 1, x + 1),
                at(&d, y, x - 1),
            ]
            .into_iter()
            .min()
            .unwrap();
            d[i] = d[i].min(m + 1);
        }
    }
    for y in (0..h as i64).rev() {
        for x in (0..w as i64).rev() {
            let i = y as usize * w + x as usize;
            if d[i] == 0 {
                continue;
            }
            let m = [
                at(&d, y + 1, x + 1),
                at(&d, y + 1, x),
                at(&d, y + 1, x - 1),
                at(&d, y, x + 1),
            ]
            .into_iter()
            .min()
            .unwrap();
            d[i] = d[i].min(m + 1);
        }
    }
    d
}

fn line(y0: i64, x0: i64, y1: i64, x1: i64, mut plot: impl FnMut(i64, i64)) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        plot(y, x);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Ordered stroke pixels for one region.
fn region_stroke<R: Rng + ?Sized>(region: &Region, h: usize, w: usize, stroke_width: usize, rng: &mut R) -> Vec<usize> {
    let mut member = vec![false; h * w];
    for &p in &region.pixels {
        member[p] = true;
    }
    let dist = inner_distance(&member, h, w);
    let mut core: Vec<usize> = region
        .pixels
        .iter()
        .copied()
        .filter(|&p| dist[p] as usize > stroke_width)
        .collect();
    if core.is_empty() {
        let best = region.pixels.iter().map(|&p| dist[p]).max().unwrap_or(0);
        core = region.pixels.iter().copied().filter(|&p| dist[p] == best).collect();
    }

    let n_points = rng.random_range(2..=4usize);
    let mut points: Vec<usize> = (0..n_points).map(|_| *core.choose(rng).unwrap()).collect();
    // Points sorted along a random direction.
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (dy, dx) = theta.sin_cos();
    points.sort_by(|&a, &b| {
        let pa = (a / w) as f64 * dy + (a % w) as f64 * dx;
        let pb = (b / w) as f64 * dy + (b % w) as f64 * dx;
        pa.total_cmp(&pb).then(a.cmp(&b))
    });

    let half = ((stroke_width - 1) / 2) as i64;
    let mut taken = vec![false; h * w];
    let mut stroke = Vec::new();
    let mut stamp = |cy: i64, cx: i64| {
        for yy in cy - half..=cy + half {
            for xx in cx - half..=cx + half {
                if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                    continue;
                }
                let q = yy as usize * w + xx as usize;
                if member[q] && !taken[q] {
                    taken[q] = true;
                    stroke.push(q);
                }
            }
        }
    };
    for pair in points.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        line(
            (a / w) as i64,
            (a % w) as i64,
            (b / w) as i64,
            (b % w) as i64,
            &mut stamp,
        );
    }
    stroke
}

/// Derives a scribble mask from a dense one. Every labeled output pixel
/// carries the dense label at that position.
pub fn synthesize_scribbles(dense: &LabelMask, params: &ScribbleParams) -> Result<LabelMask> {
    params.validate()?;
    if dense.kind() != MaskKind::Dense {
        return Err(Error::contract("scribbles are synthesized from dense masks"));
    }
    let (h, w) = dense.shape();
    let n = h * w;
    let budget_pixels = (params.coverage_budget * n as f64 + 1e-9).floor() as usize;

    let hist = dense.class_histogram();
    let qualifying: Vec<usize> = (0..hist.len())
        .filter(|&c| hist[c] > 0 && hist[c] >= params.min_region_area)
        .collect();
    if budget_pixels < qualifying.len() {
        return Err(Error::InfeasibleBudget {
            budget_pixels,
            required: qualifying.len(),
        });
    }

    let regions = connected_regions(dense);
    let mut selected: Vec<usize> = (0..regions.len())
        .filter(|&i| regions[i].pixels.len() >= params.min_region_area)
        .collect();
    // A qualifying class split into small pieces still gets its largest piece.
    for &c in &qualifying {
        if !selected.iter().any(|&i| regions[i].label as usize == c) {
            let largest = (0..regions.len())
                .filter(|&i| regions[i].label as usize == c)
                .max_by_key(|&i| (regions[i].pixels.len(), std::cmp::Reverse(i)))
                .expect("class with pixels has a region");
            selected.push(largest);
        }
    }
    selected.sort_unstable();

    let mut rng = rng_from_seed(params.seed);
    let strokes: Vec<(Label, Vec<usize>)> = selected
        .iter()
        .map(|&i| {
            (
                regions[i].label,
                region_stroke(&regions[i], h, w, params.stroke_width, &mut rng),
            )
        })
        .collect();

    let total: usize = strokes.iter().map(|(_, s)| s.len()).sum();
    let keep: Vec<usize> = if total <= budget_pixels {
        strokes.iter().map(|(_, s)| s.len()).collect()
    } else {
        // One anchor stroke per qualifying class is guaranteed a pixel.
        let mut anchor = vec![false; strokes.len()];
        for &c in &qualifying {
            if let Some(best) = (0..strokes.len())
                .filter(|&i| strokes[i].0 as usize == c)
                .max_by_key(|&i| (strokes[i].1.len(), std::cmp::Reverse(i)))
            {
                anchor[best] = true;
            }
        }
        let reserved = anchor.iter().filter(|&&a| a).count();
        let ratio = (budget_pixels - reserved) as f64 / total as f64;
        strokes
            .iter()
            .zip(&anchor)
            .map(|((_, s), &a)| {
                let k = (s.len() as f64 * ratio).floor() as usize + usize::from(a);
                k.min(s.len())
            })
            .collect()
    };

    let mut out = LabelMask::filled(h, w, dense.num_classes(), MaskKind::Scribble, IGNORE);
    for ((label, stroke), k) in strokes.iter().zip(keep) {
        for &p in &stroke[..k] {
            out.set(p / w, p % w, *label);
        }
    }
    Ok(out)
}

/// Scribble seed of one record: the dataset seed mixed with the record id,
/// so a record's scribble does not depend on its position in the manifest.
pub fn record_scribble_seed(seed: u64, id: &str) -> u64 {
    derive_seed(seed, Purpose::Scribble, &[id_key(id)])
}

/// Writes a scribble mask for every record of `manifest` under
/// `out_dir/masks` plus a manifest pointing back at the original images.
pub fn scribble_dataset(
    manifest: &DatasetManifest,
    params: &ScribbleParams,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    params.validate()?;
    let masks_dir = out_dir.join("masks");
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    let out_abs = fs::canonicalize(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let root_abs = fs::canonicalize(&manifest.root).map_err(|e| Error::io(&manifest.root, e))?;
    let mut records = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        let dense = manifest
            .load_mask(r)?
            .ok_or_else(|| Error::contract(format!("record `{}` has no dense mask", r.id)))?;
        let p = ScribbleParams {
            seed: record_scribble_seed(params.seed, &r.id),
            ..*params
        };
        let scribble = synthesize_scribbles(&dense.with_kind(MaskKind::Dense), &p)?;
        let rel = Path::new("masks").join(format!("{}.png", r.id));
        save_indexed_mask(&out_dir.join(&rel), &scribble, manifest.ignore_value_on_disk)?;
        let image = if r.image.is_absolute() {
            r.image.clone()
        } else {
            pathdiff::diff_paths(root_abs.join(&r.image), &out_abs).unwrap_or_else(|| root_abs.join(&r.image))
        };
        records.push(Record {
            image,
            mask: Some(rel),
            ..r.clone()
        });
    }
    let out = DatasetManifest::new(
        manifest.class_names.clone(),
        manifest.ignore_value_on_disk,
        records,
        out_dir.to_path_buf(),
    )?;
    out.save(&out_dir.join("manifest.jsonl"))?;
    Ok(out)
}
