//! WebAssembly bindings for the browser demo.
//!
//! The plain functions return RGBA buffers and numbers so they can be tested
//! natively; the `wasm_bindgen` wrappers only convert errors.

use scribble_transfer::data::augment::augment_pair;
use scribble_transfer::data::synth::generate_sample;
use scribble_transfer::data::{
    synthesize_scribbles, AugmentParams, Domain, ImageTensor, LabelMask, ScribbleParams, SynthSpec, Task, IGNORE,
};
use scribble_transfer::seed::rng_from_seed;
use scribble_transfer::training::{exp_lr, poly_lr};
use wasm_bindgen::prelude::*;

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [188, 189, 34],
];

pub fn image_rgba(image: &ImageTensor) -> Vec<u8> {
    image
        .to_rgb8()
        .chunks(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

/// Class colors; ignored pixels are fully transparent.
pub fn mask_rgba(mask: &LabelMask) -> Vec<u8> {
    mask.data()
        .iter()
        .flat_map(|&l| {
            if l == IGNORE {
                [0, 0, 0, 0]
            } else {
                let [r, g, b] = PALETTE[l as usize % PALETTE.len()];
                [r, g, b, 255]
            }
        })
        .collect()
}

/// One synthetic segmentation sample with its dense and scribble masks.
#[wasm_bindgen]
pub struct ScribbleView {
    size: usize,
    image: Vec<u8>,
    dense: Vec<u8>,
    scribble: Vec<u8>,
    coverage: f64,
}

#[wasm_bindgen]
impl ScribbleView {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn dense(&self) -> Vec<u8> {
        self.dense.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn scribble(&self) -> Vec<u8> {
        self.scribble.clone()
    }

    /// Fraction of pixels carrying a scribble label.
    #[wasm_bindgen(getter)]
    pub fn coverage(&self) -> f64 {
        self.coverage
    }
}

fn sample_spec(size: usize, classes: usize, seed: u32) -> SynthSpec {
    SynthSpec {
        domain: Domain::A,
        task: Task::Seg,
        n: 1,
        image_size: size,
        num_classes: classes,
        seed: u64::from(seed),
    }
}

fn dense_sample(size: usize, classes: usize, seed: u32, index: usize) -> Result<(ImageTensor, LabelMask), String> {
    if !(8..=256).contains(&size) || !(2..=PALETTE.len()).contains(&classes) {
        return Err(format!(
            "size must lie in [8, 256] and classes in [2, {}]",
            PALETTE.len()
        ));
    }
    let s = generate_sample(&sample_spec(size, classes, seed), index);
    Ok((s.image, s.mask.expect("segmentation samples carry a mask")))
}

pub fn scribble_view(
    size: usize,
    classes: usize,
    seed: u32,
    index: usize,
    stroke_width: usize,
    coverage_budget: f64,
) -> Result<ScribbleView, String> {
    let (image, dense) = dense_sample(size, classes, seed, index)?;
    let params = ScribbleParams {
        stroke_width,
        coverage_budget,
        min_region_area: 16,
        seed: u64::from(seed) ^ index as u64,
    };
    let scribble = synthesize_scribbles(&dense, &params).map_err(|e| e.to_string())?;
    Ok(ScribbleView {
        size,
        image: image_rgba(&image),
        dense: mask_rgba(&dense),
        coverage: scribble.labeled_fraction(),
        scribble: mask_rgba(&scribble),
    })
}

/// An augmented image/mask pair.
#[wasm_bindgen]
pub struct AugmentView {
    size: usize,
    image: Vec<u8>,
    mask: Vec<u8>,
}

#[wasm_bindgen]
impl AugmentView {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    #[wasm_bindgen(getter)]
    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }
}

pub fn augment_view(
    size: usize,
    classes: usize,
    seed: u32,
    index: usize,
    draw: u32,
    params: AugmentParams,
) -> Result<AugmentView, String> {
    if !(params.scale_min > 0.0 && params.scale_min <= params.scale_max) || params.crop_size == 0 {
        return Err("need 0 < scale_min <= scale_max and a positive crop size".into());
    }
    let (image, dense) = dense_sample(size, classes, seed, index)?;
    let mut rng = rng_from_seed(u64::from(draw));
    let (image, mask) = augment_pair(&image, Some(&dense), &params, &mut rng);
    Ok(AugmentView {
        size: params.crop_size,
        image: image_rgba(&image),
        mask: mask_rgba(&mask.expect("mask was provided")),
    })
}

/// Learning rate at `points` evenly spaced iterations of the poly schedule.
pub fn poly_curve(base_lr: f64, power: f64, max_iter: u64, points: usize) -> Result<Vec<f64>, String> {
    if points < 2 || max_iter == 0 {
        return Err("need at least 2 points and max_iter >= 1".into());
    }
    (0..points)
        .map(|i| {
            let iter = (i as u64 * max_iter) / (points as u64 - 1);
            poly_lr(iter, max_iter, base_lr, power).map_err(|e| e.to_string())
        })
        .collect()
}

/// Learning rate at every epoch `0..=epochs` of the exponential schedule.
pub fn exp_curve(base_lr: f64, factor: f64, epochs: u64) -> Vec<f64> {
    (0..=epochs).map(|e| exp_lr(e, base_lr, factor)).collect()
}

#[wasm_bindgen(js_name = scribbleView)]
pub fn js_scribble_view(
    size: usize,
    classes: usize,
    seed: u32,
    index: usize,
    stroke_width: usize,
    coverage_budget: f64,
) -> Result<ScribbleView, JsError> {
    scribble_view(size, classes, seed, index, stroke_width, coverage_budget).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = augmentView)]
#[allow(clippy::too_many_arguments)]
pub fn js_augment_view(
    size: usize,
    classes: usize,
    seed: u32,
    index: usize,
    draw: u32,
    scale_min: f64,
    scale_max: f64,
    crop_size: usize,
    hflip_p: f64,
) -> Result<AugmentView, JsError> {
    let params = AugmentParams {
        scale_min,
        scale_max,
        crop_size,
        hflip_p,
    };
    augment_view(size, classes, seed, index, draw, params).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = polyCurve)]
pub fn js_poly_curve(base_lr: f64, power: f64, max_iter: u32, points: usize) -> Result<Vec<f64>, JsError> {
    poly_curve(base_lr, power, u64::from(max_iter), points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = expCurve)]
pub fn js_exp_curve(base_lr: f64, factor: f64, epochs: u32) -> Vec<f64> {
    exp_curve(base_lr, factor, u64::from(epochs))
}
