mod common;

use common::{num, oracle, random_logits, random_mask, rel_err};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scribble_transfer::data::{ClassTarget, LabelMask, MaskKind, IGNORE};
use scribble_transfer::losses::{
    bce_multilabel, bce_multilabel_with_grad, masked_seg_loss, masked_seg_loss_with_grad, softmax_ce_pixel, LogitsMap,
    Normalization,
};

#[test]
fn closed_form_pixel_values() {
    assert!((softmax_ce_pixel(&[0.0, 0.0], 0) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(softmax_ce_pixel(&[1000.0, 0.0], 0).abs() < 1e-300);
    for label in 0..21 {
        assert!((softmax_ce_pixel(&[0.7; 21], label) - 21f64.ln()).abs() < 1e-14);
    }
}

#[test]
fn normalization_modes_on_two_pixels() {
    let logits = LogitsMap::new(1, 2, 2, vec![0.0; 4]).unwrap();
    let mask = LabelMask::new(1, 2, 2, MaskKind::Scribble, vec![0, IGNORE]).unwrap();
    let l = masked_seg_loss(&logits, &mask, Normalization::Labeled).unwrap();
    let p = masked_seg_loss(&logits, &mask, Normalization::AllPixels).unwrap();
    assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((p.value - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);
    assert_eq!(l.labeled_count, 1);
}

#[test]
fn bce_closed_forms() {
    let t = ClassTarget::Multi(vec![true, false, true]);
    assert!((bce_multilabel(&[0.0; 3], &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    let sat = bce_multilabel(&[1000.0, -1000.0], &ClassTarget::Multi(vec![true, false])).unwrap();
    assert!(sat.abs() < 1e-300);
    assert!(bce_multilabel(&[0.0, 0.0], &ClassTarget::Single(1)).is_err());
}

#[test]
fn bce_matches_high_precision_oracle() {
    for case in oracle("bce.json").as_array().unwrap() {
        let z: Vec<f64> = case["logits"].as_array().unwrap().iter().map(num).collect();
        let t: Vec<bool> = case["target"]
            .as_array()
            .unwrap()
            .iter()
            .map(|b| b.as_bool().unwrap())
            .collect();
        let got = bce_multilabel(&z, &ClassTarget::Multi(t)).unwrap();
        let want = num(&case["value"]);
        assert!(rel_err(got, want) < 1e-13, "{got} vs {want}");
    }
}

#[test]
fn bce_gradient_is_sigmoid_minus_target() {
    let (_, g) = bce_multilabel_with_grad(&[0.0, 2.0], &ClassTarget::Multi(vec![true, false])).unwrap();
    assert!((g[0] - (0.5 - 1.0) / 2.0).abs() < 1e-15);
    assert!((g[1] - (1.0 / (1.0 + (-2.0f64).exp())) / 2.0).abs() < 1e-15);
}

#[test]
fn shape_mismatch_is_rejected() {
    let logits = LogitsMap::new(2, 2, 2, vec![0.0; 8]).unwrap();
    let mask = LabelMask::filled(2, 3, 2, MaskKind::Dense, 0);
    assert!(masked_seg_loss(&logits, &mask, Normalization::Labeled).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permuting_classes_leaves_loss_unchanged(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_logits(h, w, k, &mut rng);
        let mask = random_mask(h, w, k, 0.4, &mut rng);
        let perm: Vec<usize> = (0..k).rev().collect();
        let mut pdata = vec![0.0; logits.data().len()];
        for p in 0..h * w {
            for c in 0..k {
                pdata[p * k + perm[c]] = logits.data()[p * k + c];
            }
        }
        let plogits = LogitsMap::new(h, w, k, pdata).unwrap();
        let pmask_data = mask.data().iter().map(|&l| if l == IGNORE { l } else { perm[l as usize] as u16 }).collect();
        let pmask = LabelMask::new(h, w, k, mask.kind(), pmask_data).unwrap();
        for mode in [Normalization::Labeled, Normalization::AllPixels] {
            let a = masked_seg_loss(&logits, &mask, mode).unwrap().value;
            let b = masked_seg_loss(&plogits, &pmask, mode).unwrap().value;
            prop_assert!(rel_err(a, b) < 1e-12);
        }
    }

    #[test]
    fn all_pixel_mode_is_rescaled_labeled_mode(seed in any::<u64>(), h in 1usize..8, w in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_logits(h, w, 3, &mut rng);
        let mask = random_mask(h, w, 3, 0.5, &mut rng);
        let l = masked_seg_loss(&logits, &mask, Normalization::Labeled).unwrap();
        let p = masked_seg_loss(&logits, &mask, Normalization::AllPixels).unwrap();
        prop_assert_eq!(l.labeled_count, p.labeled_count);
        let expect = l.value * l.labeled_count as f64 / (h * w) as f64;
        prop_assert!(rel_err(p.value, expect) < 1e-12);
    }

    #[test]
    fn labeling_one_more_pixel_never_lowers_the_count(seed in any::<u64>(), h in 1usize..8, w in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_logits(h, w, 3, &mut rng);
        let mask = random_mask(h, w, 3, 0.7, &mut rng);
        let before = masked_seg_loss(&logits, &mask, Normalization::AllPixels).unwrap();
        if let Some(p) = mask.data().iter().position(|&l| l == IGNORE) {
            let mut more = mask.clone();
            more.set(p / w, p % w, 1);
            let after = masked_seg_loss(&logits, &more, Normalization::AllPixels).unwrap();
            prop_assert_eq!(after.labeled_count, before.labeled_count + 1);
            prop_assert!(after.value >= before.value);
        }
    }

    #[test]
    fn ignored_pixels_get_exactly_zero_gradient(seed in any::<u64>(), h in 1usize..8, w in 1usize..8, k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_logits(h, w, k, &mut rng);
        let mask = random_mask(h, w, k, 0.6, &mut rng);
        for mode in [Normalization::Labeled, Normalization::AllPixels] {
            let (_, g) = masked_seg_loss_with_grad(&logits, &mask, mode).unwrap();
            for (p, &l) in mask.data().iter().enumerate() {
                if l == IGNORE {
                    prop_assert!(g[p * k..(p + 1) * k].iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}
