//! Paired image/mask augmentation: random re-scaling, random cropping and
//! random horizontal flipping. Each transform draws one random decision and
//! applies it to both members of the pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{ImageTensor, CHANNELS};
use super::mask::{LabelMask, IGNORE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop_size: usize,
    pub hflip_p: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            scale_min: 0.5,
            scale_max: 1.5,
            crop_size: 321,
            hflip_p: 0.5,
        }
    }
}

fn scaled_dim(d: usize, s: f64) -> usize {
    ((d as f64 * s).ceil() as usize).max(1)
}

/// Bilinear resampling (half-pixel centers, edge clamped).
pub fn resize_bilinear(image: &ImageTensor, new_h: usize, new_w: usize) -> ImageTensor {
    let (h, w) = image.shape();
    if (h, w) == (new_h, new_w) {
        return image.clone();
    }
    let ry = h as f64 / new_h as f64;
    let rx = w as f64 / new_w as f64;
    let axis = |dst: usize, ratio: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * ratio - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..new_w).map(|x| axis(x, rx, w)).collect();
    let src = image.data();
    let mut out = vec![0.0f32; new_h * new_w * CHANNELS];
    for y in 0..new_h {
        let (y0, y1, fy) = axis(y, ry, h);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for c in 0..CHANNELS {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * CHANNELS + c];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(y * new_w + x) * CHANNELS + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    ImageTensor::new(new_h, new_w, out).expect("interpolated values stay finite")
}

/// Nearest-neighbour resampling; labels are copied, never blended.
pub fn resize_nearest(mask: &LabelMask, new_h: usize, new_w: usize) -> LabelMask {
    let (h, w) = mask.shape();
    let pick = |dst: usize, len: usize, new_len: usize| {
        (((dst as f64 + 0.5) * len as f64 / new_len as f64).floor() as usize).min(len - 1)
    };
    let cols: Vec<usize> = (0..new_w).map(|x| pick(x, w, new_w)).collect();
    let mut out = LabelMask::filled(new_h, new_w, mask.num_classes(), mask.kind(), IGNORE);
    for y in 0..new_h {
        let sy = pick(y, h, new_h);
        for (x, &sx) in cols.iter().enumerate() {
            out.set(y, x, mask.get(sy, sx));
        }
    }
    out
}

pub fn rescale_by(image: &ImageTensor, mask: Option<&LabelMask>, s: f64) -> (ImageTensor, Option<LabelMask>) {
    assert!(s > 0.0 && s.is_finite(), "scale must be positive");
    let (h, w) = image.shape();
    let (nh, nw) = (scaled_dim(h, s), scaled_dim(w, s));
    let img = resize_bilinear(image, nh, nw);
    let m = mask.map(|m| {
        assert_eq!(m.shape(), (h, w), "image/mask shape mismatch");
        resize_nearest(m, nh, nw)
    });
    (img, m)
}

/// Re-scales by one factor drawn uniformly from `[lo, hi]`.
pub fn random_rescale<R: Rng + ?Sized>(
    image: &ImageTensor,
    mask: Option<&LabelMask>,
    range: (f64, f64),
    rng: &mut R,
) -> (ImageTensor, Option<LabelMask>) {
    let (lo, hi) = range;
    assert!(lo > 0.0 && hi >= lo, "scale range must lie in (0, ∞)");
    let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    rescale_by(image, mask, s)
}

/// Source coordinates of the crop's top-left corner. Negative values mean
/// the output is padded on that side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropOrigin {
    pub row: i64,
    pub col: i64,
}

fn axis_origin<R: Rng + ?Sized>(len: usize, size: usize, rng: &mut R) -> i64 {
    if len >= size {
        rng.random_range(0..=(len - size)) as i64
    } else {
        -(((size - len) / 2) as i64)
    }
}

pub fn crop_at(
    image: &ImageTensor,
    mask: Option<&LabelMask>,
    size: usize,
    origin: CropOrigin,
) -> (ImageTensor, Option<LabelMask>) {
    let (h, w) = image.shape();
    let mut img = ImageTensor::zeros(size, size);
    let mut out_mask = mask.map(|m| {
        assert_eq!(m.shape(), (h, w), "image/mask shape mismatch");
        LabelMask::filled(size, size, m.num_classes(), m.kind(), IGNORE)
    });
    for y in 0..size {
        let sy = y as i64 + origin.row;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for x in 0..size {
            let sx = x as i64 + origin.col;
            if sx < 0 || sx >= w as i64 {
                continue;
            }
            img.set_pixel(y, x, image.pixel(sy as usize, sx as usize));
            if let (Some(om), Some(m)) = (out_mask.as_mut(), mask) {
                om.set(y, x, m.get(sy as usize, sx as usize));
            }
        }
    }
    (img, out_mask)
}

pub fn random_crop_origin<R: Rng + ?Sized>(h: usize, w: usize, size: usize, rng: &mut R) -> CropOrigin {
    let row = axis_origin(h, size, rng);
    let col = axis_origin(w, size, rng);
    CropOrigin { row, col }
}

/// `size × size` crop at a uniform offset; smaller inputs are centred and
/// padded with 0 (image) and IGNORE (mask).
pub fn random_crop<R: Rng + ?Sized>(
    image: &ImageTensor,
    mask: Option<&LabelMask>,
    size: usize,
    rng: &mut R,
) -> (ImageTensor, Option<LabelMask>) {
    let origin = random_crop_origin(image.height(), image.width(), size, rng);
    crop_at(image, mask, size, origin)
}

pub fn hflip(image: &ImageTensor, mask: Option<&LabelMask>) -> (ImageTensor, Option<LabelMask>) {
    let (h, w) = image.shape();
    let mut img = image.clone();
    for y in 0..h {
        for x in 0..w {
            img.set_pixel(y, x, image.pixel(y, w - 1 - x));
        }
    }
    let m = mask.map(|m| {
        let mut out = m.clone();
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, m.get(y, w - 1 - x));
            }
        }
        out
    });
    (img, m)
}

pub fn random_hflip<R: Rng + ?Sized>(
    image: &ImageTensor,
    mask: Option<&LabelMask>,
    p: f64,
    rng: &mut R,
) -> (ImageTensor, Option<LabelMask>) {
    if rng.random_bool(p.clamp(0.0, 1.0)) {
        hflip(image, mask)
    } else {
        (image.clone(), mask.cloned())
    }
}

/// Re-scale, crop, flip.
pub fn augment_pair<R: Rng + ?Sized>(
    image: &ImageTensor,
    mask: Option<&LabelMask>,
    params: &AugmentParams,
    rng: &mut R,
) -> (ImageTensor, Option<LabelMask>) {
    let (img, m) = random_rescale(image, mask, (params.scale_min, params.scale_max), rng);
    let (img, m) = random_crop(&img, m.as_ref(), params.crop_size, rng);
    random_hflip(&img, m.as_ref(), params.hflip_p, rng)
}
