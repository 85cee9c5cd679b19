//! Desk-scale synthetic datasets.
//!
//! Both domains draw their textures from one shared family bank, so
//! low-level statistics carry over, while layouts differ:
//!
//! * Domain A (source): a few large geometric shapes on a smooth background.
//!   Each foreground class has its own texture family; colours are random
//!   and carry no class information. Masks are exact.
//! * Domain B (target): tissue-like fields of small blobs on a smooth stain.
//!   The patch class is the texture family most blobs are filled with.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use super::manifest::{save_indexed_mask, save_rgb_image, DatasetManifest, Record, DEFAULT_IGNORE_ON_DISK};
use super::mask::{ClassTarget, Label, LabelMask, MaskKind};
use crate::error::{Error, Result};
use crate::seed::{rng, Purpose, Rng as SeedRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub domain: Domain,
    pub task: Task,
    pub n: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub seed: u64,
}

/// Texture families shared by both domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Stripes,
    Dots,
    Checker,
    Grain,
}

pub const FAMILIES: [Family; 4] = [Family::Stripes, Family::Dots, Family::Checker, Family::Grain];

impl Family {
    fn name(self) -> &'static str {
        match self {
            Family::Stripes => "stripes",
            Family::Dots => "dots",
            Family::Checker => "checker",
            Family::Grain => "grain",
        }
    }
}

/// One realised texture: an intensity field in `[0, 1]`.
#[derive(Clone, Debug)]
enum Texture {
    Stripes { freq: f64, cos: f64, sin: f64, phase: f64 },
    Dots { period: f64, radius: f64, ox: f64, oy: f64 },
    Checker { period: f64, ox: f64, oy: f64 },
    Grain { values: Vec<f32>, width: usize },
    Smooth { grid: Vec<f32>, cells: usize, cell: f64 },
}

impl Texture {
    fn sample<R: Rng + ?Sized>(family: Family, size: usize, rng: &mut R) -> Self {
        match family {
            Family::Stripes => {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Texture::Stripes {
                    freq: rng.random_range(0.17..0.26),
                    cos: theta.cos(),
                    sin: theta.sin(),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                }
            }
            Family::Dots => {
                let period = rng.random_range(5.0..7.0);
                Texture::Dots {
                    period,
                    radius: period * rng.random_range(0.26..0.34),
                    ox: rng.random_range(0.0..period),
                    oy: rng.random_range(0.0..period),
                }
            }
            Family::Checker => {
                let period = rng.random_range(3.0..5.0);
                Texture::Checker {
                    period,
                    ox: rng.random_range(0.0..period),
                    oy: rng.random_range(0.0..period),
                }
            }
            Family::Grain => Texture::Grain {
                values: (0..size * size).map(|_| rng.random::<f32>()).collect(),
                width: size,
            },
        }
    }

    fn smooth<R: Rng + ?Sized>(size: usize, cell: f64, rng: &mut R) -> Self {
        let cells = (size as f64 / cell).ceil() as usize + 2;
        Texture::Smooth {
            grid: (0..cells * cells).map(|_| rng.random::<f32>()).collect(),
            cells,
            cell,
        }
    }

    fn at(&self, y: usize, x: usize) -> f32 {
        let (yf, xf) = (y as f64, x as f64);
        match self {
            Texture::Stripes { freq, cos, sin, phase } => {
                (0.5 + 0.5 * (std::f64::consts::TAU * freq * (xf * cos + yf * sin) + phase).sin()) as f32
            }
            Texture::Dots { period, radius, ox, oy } => {
                let dx = (xf + ox).rem_euclid(*period) - period / 2.0;
                let dy = (yf + oy).rem_euclid(*period) - period / 2.0;
                let d = (dx * dx + dy * dy).sqrt();
                (radius + 0.5 - d).clamp(0.0, 1.0) as f32
            }
            Texture::Checker { period, ox, oy } => {
                let a = ((xf + ox) / period).floor() as i64 + ((yf + oy) / period).floor() as i64;
                a.rem_euclid(2) as f32
            }
            Texture::Grain { values, width } => values[y * width + x],
            Texture::Smooth { grid, cells, cell } => {
                let gy = yf / cell;
                let gx = xf / cell;
                let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
                let (fy, fx) = ((gy - y0 as f64) as f32, (gx - x0 as f64) as f32);
                let g = |yy: usize, xx: usize| grid[yy.min(cells - 1) * cells + xx.min(cells - 1)];
                let top = g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx;
                let bot = g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx;
                top * (1.0 - fy) + bot * fy
            }
        }
    }
}

/// Two colours a texture interpolates between.
#[derive(Clone, Copy, Debug)]
struct Palette {
    lo: [f32; 3],
    hi: [f32; 3],
}

impl Palette {
    fn natural<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let lo: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.6));
        let shift = rng.random_range(0.3..0.4);
        let hi = lo.map(|c| (c + shift).min(1.0));
        Palette { lo, hi }
    }

    fn stain<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let j = |rng: &mut R, v: f32| (v + rng.random_range(-0.08..0.08f32)).clamp(0.0, 1.0);
        Palette {
            lo: [j(rng, 0.45), j(rng, 0.22), j(rng, 0.55)],
            hi: [j(rng, 0.92), j(rng, 0.72), j(rng, 0.85)],
        }
    }

    fn color(&self, t: f32) -> [f32; 3] {
        std::array::from_fn(|c| self.lo[c] * (1.0 - t) + self.hi[c] * t)
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle {
        cy: f64,
        cx: f64,
        r: f64,
    },
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        cos: f64,
        sin: f64,
    },
    Rect {
        y0: f64,
        x0: f64,
        y1: f64,
        x1: f64,
    },
    Triangle {
        p: [(f64, f64); 3],
    },
}

impl Shape {
    fn random<R: Rng + ?Sized>(size: usize, min_r: f64, max_r: f64, rng: &mut R, allow_polygons: bool) -> Self {
        let s = size as f64;
        let r = rng.random_range(min_r..max_r) * s;
        let cy = rng.random_range(r * 0.5..s - r * 0.5);
        let cx = rng.random_range(r * 0.5..s - r * 0.5);
        let kinds = if allow_polygons { 4 } else { 2 };
        match rng.random_range(0..kinds) {
            0 => Shape::Circle { cy, cx, r },
            1 => {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Shape::Ellipse {
                    cy,
                    cx,
                    ry: r * rng.random_range(0.6..1.0),
                    rx: r * rng.random_range(1.0..1.4),
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            }
            2 => Shape::Rect {
                y0: cy - r * rng.random_range(0.6..1.0),
                x0: cx - r * rng.random_range(0.6..1.0),
                y1: cy + r * rng.random_range(0.6..1.0),
                x1: cx + r * rng.random_range(0.6..1.0),
            },
            _ => {
                let base: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let p = std::array::from_fn(|i| {
                    let a = base + i as f64 * std::f64::consts::TAU / 3.0 + rng.random_range(-0.3..0.3);
                    let rr = r * rng.random_range(0.9..1.3);
                    (cy + rr * a.sin(), cx + rr * a.cos())
                });
                Shape::Triangle { p }
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                cos,
                sin,
            } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            Shape::Triangle { p } => {
                let cross = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let d = [cross(p[0], p[1]), cross(p[1], p[2]), cross(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

/// One generated sample, kept in memory.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub image: ImageTensor,
    /// Dense mask (domain A always; domain B when the task is segmentation).
    pub mask: Option<LabelMask>,
    pub target: ClassTarget,
}

/// Texture family of foreground class `c ≥ 1` in domain A.
pub fn domain_a_family(class: usize) -> Family {
    FAMILIES[(class - 1) % FAMILIES.len()]
}

/// Texture family defining class `c` in domain B.
pub fn domain_b_family(class: usize) -> Family {
    FAMILIES[class % FAMILIES.len()]
}

pub fn class_names(domain: Domain, num_classes: usize) -> Vec<String> {
    match domain {
        Domain::A => std::iter::once("background".to_string())
            .chain((1..num_classes).map(|c| {
                let f = domain_a_family(c).name();
                if c <= FAMILIES.len() {
                    f.to_string()
                } else {
                    format!("{f}_{c}")
                }
            }))
            .collect(),
        Domain::B => (0..num_classes)
            .map(|c| {
                let f = domain_b_family(c).name();
                if c < FAMILIES.len() {
                    format!("tissue_{f}")
                } else {
                    format!("tissue_{f}_{c}")
                }
            })
            .collect(),
    }
}

fn domain_a_sample(spec: &SynthSpec, rng: &mut SeedRng) -> SynthSample {
    let size = spec.image_size;
    let k = spec.num_classes;
    let noise = Normal::new(0.0f32, 0.03).expect("valid sigma");
    let background = Texture::smooth(size, rng.random_range(10.0..18.0), rng);
    let bg_palette = Palette::natural(rng);

    let n_shapes = rng.random_range(1..=3usize);
    let mut layers = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let class = rng.random_range(1..k);
        let shape = Shape::random(size, 0.16, 0.30, rng, true);
        let texture = Texture::sample(domain_a_family(class), size, rng);
        layers.push((class, shape, texture, Palette::natural(rng)));
    }

    let mut image = ImageTensor::zeros(size, size);
    let mut mask = LabelMask::filled(size, size, k, MaskKind::Dense, 0);
    for y in 0..size {
        for x in 0..size {
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut label = 0usize;
            let mut rgb = bg_palette.color(background.at(y, x));
            for (class, shape, texture, palette) in &layers {
                if shape.contains(yc, xc) {
                    label = *class;
                    rgb = palette.color(texture.at(y, x));
                }
            }
            let rgb = rgb.map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0));
            image.set_pixel(y, x, rgb);
            mask.set(y, x, label as Label);
        }
    }
    let hist = mask.class_histogram();
    let bits: Vec<bool> = hist.iter().enumerate().map(|(c, &n)| c > 0 && n > 0).collect();
    SynthSample {
        image,
        mask: Some(mask),
        target: ClassTarget::Multi(bits),
    }
}

/// Fraction of blobs drawn from the class family; the rest are distractors.
const DOMAIN_B_PURITY: f64 = 0.7;

fn domain_b_sample(spec: &SynthSpec, class: usize, rng: &mut SeedRng) -> SynthSample {
    let size = spec.image_size;
    let k = spec.num_classes;
    let noise = Normal::new(0.0f32, 0.04).expect("valid sigma");
    let stain = Texture::smooth(size, rng.random_range(6.0..12.0), rng);
    let stain_palette = Palette::stain(rng);
    let scale = size as f64 / 64.0;
    let n_blobs = (rng.random_range(7..=11) as f64 * scale.max(1.0)).round() as usize;

    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let family = if rng.random_bool(DOMAIN_B_PURITY) {
            domain_b_family(class)
        } else {
            FAMILIES[rng.random_range(0..FAMILIES.len())]
        };
        let shape = Shape::random(size, 0.08, 0.16, rng, false);
        blobs.push((family, shape, Texture::sample(family, size, rng), Palette::stain(rng)));
    }

    let mut image = ImageTensor::zeros(size, size);
    let mut mask = LabelMask::filled(size, size, k, MaskKind::Dense, 0);
    for y in 0..size {
        for x in 0..size {
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut rgb = stain_palette.color(0.3 + 0.4 * stain.at(y, x));
            let mut label = 0usize;
            for (family, shape, texture, palette) in &blobs {
                if shape.contains(yc, xc) {
                    rgb = palette.color(texture.at(y, x));
                    let f = FAMILIES.iter().position(|g| g == family).unwrap();
                    label = 1 + f % (k - 1);
                }
            }
            let rgb = rgb.map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0));
            image.set_pixel(y, x, rgb);
            mask.set(y, x, label as Label);
        }
    }
    SynthSample {
        image,
        mask: (spec.task == Task::Seg).then_some(mask),
        target: ClassTarget::Single(class),
    }
}

/// Sample `index` of the dataset described by `spec`. Pure function of
/// `(spec, index)`.
pub fn generate_sample(spec: &SynthSpec, index: usize) -> SynthSample {
    let domain_tag = match spec.domain {
        Domain::A => 0u64,
        Domain::B => 1,
    };
    let mut rng = rng(
        spec.seed,
        Purpose::Synth,
        &[domain_tag, spec.image_size as u64, index as u64],
    );
    match spec.domain {
        Domain::A => domain_a_sample(spec, &mut rng),
        Domain::B => domain_b_sample(spec, index % spec.num_classes, &mut rng),
    }
}

fn validate(spec: &SynthSpec) -> Result<()> {
    if spec.n < 1 {
        return Err(Error::contract("synthetic dataset needs n ≥ 1"));
    }
    if spec.num_classes < 2 {
        return Err(Error::contract("synthetic dataset needs K ≥ 2"));
    }
    if spec.image_size < 8 {
        return Err(Error::contract("synthetic images must be at least 8×8"));
    }
    Ok(())
}

/// Writes images, masks and `manifest.jsonl` under `out_dir`.
pub fn generate_synthetic_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    validate(spec)?;
    let prefix = match spec.domain {
        Domain::A => "a",
        Domain::B => "b",
    };
    for sub in ["images", "masks"] {
        fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }
    let mut records = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let sample = generate_sample(spec, i);
        let id = format!("{prefix}{i:06}");
        let image_rel = Path::new("images").join(format!("{id}.png"));
        save_rgb_image(&out_dir.join(&image_rel), &sample.image)?;
        let mask_rel = match &sample.mask {
            Some(m) if spec.task == Task::Seg => {
                let rel = Path::new("masks").join(format!("{id}.png"));
                save_indexed_mask(&out_dir.join(&rel), m, DEFAULT_IGNORE_ON_DISK)?;
                Some(rel)
            }
            _ => None,
        };
        let (label, labels) = match &sample.target {
            ClassTarget::Single(c) => (Some(*c), None),
            ClassTarget::Multi(bits) => (
                None,
                Some(bits.iter().enumerate().filter(|(_, &b)| b).map(|(c, _)| c).collect()),
            ),
        };
        records.push(Record {
            id,
            image: image_rel,
            mask: mask_rel,
            label,
            labels,
        });
    }
    let manifest = DatasetManifest::new(
        class_names(spec.domain, spec.num_classes),
        DEFAULT_IGNORE_ON_DISK,
        records,
        out_dir.to_path_buf(),
    )?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
