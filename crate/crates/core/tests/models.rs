use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scribble_transfer::models::{
    build_backbone, build_classification_model, build_segmentation_model, transfer_backbone_weights, Checkpoint,
    CheckpointMeta, HeadKind, Model, ModelConfig, Preset, Setting,
};
use scribble_transfer::nn::{Mode, Tensor};
use scribble_transfer::Error;

fn random_input<T: scribble_transfer::nn::Real>(n: usize, h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3 * h * w)
        .map(|_| T::lit(rng.random_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(n, 3, h, w, data)
}

fn meta(setting: Setting) -> CheckpointMeta {
    CheckpointMeta {
        config_hash: "test".into(),
        setting,
        iteration: 0,
        master_seed: 3,
        preset: "tiny".into(),
    }
}

/// Weighted sum of outputs; its gradient with respect to the output is the weights.
fn objective(y: &Tensor<f64>, weights: &[f64]) -> f64 {
    y.data.iter().zip(weights).map(|(a, b)| a * b).sum()
}

fn check_model_gradients(config: &ModelConfig, mode: Mode) {
    let mut model = match config.head {
        HeadKind::Segmentation => build_segmentation_model::<f64>(config, 11).unwrap(),
        HeadKind::Classification => build_classification_model::<f64>(config, 11).unwrap(),
    };
    let x = random_input::<f64>(2, 16, 16, 5);
    if mode == Mode::Eval {
        // Non-trivial running statistics.
        for _ in 0..3 {
            model.forward(&random_input(2, 16, 16, 99), Mode::Train);
        }
    }
    let y = model.forward(&x, mode);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let weights: Vec<f64> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    model.zero_grad();
    let dx = model.backward(&Tensor::from_vec(y.n, y.c, y.h, y.w, weights.clone()));

    let eps = 1e-6;
    let mut checked = 0;
    let names: Vec<String> = model
        .params()
        .into_iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n)
        .collect();
    for name in names {
        let (len, analytic) = {
            let params = model.params();
            let p = params.iter().find(|(n, _)| *n == name).unwrap().1;
            (p.len(), p.grad.clone())
        };
        for _ in 0..3 {
            let i = rng.random_range(0..len);
            let mut eval = |delta: f64| {
                for (n, p) in model.params_mut() {
                    if n == name {
                        p.value[i] += delta;
                    }
                }
                let v = objective(&model.forward(&x, mode), &weights);
                for (n, p) in model.params_mut() {
                    if n == name {
                        p.value[i] -= delta;
                    }
                }
                v
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                err < 1e-4,
                "{name}[{i}] in {mode:?}: analytic {} vs numeric {fd}",
                analytic[i]
            );
            checked += 1;
        }
    }
    assert!(checked > 30);

    for _ in 0..10 {
        let i = rng.random_range(0..x.data.len());
        let mut xp = x.clone();
        xp.data[i] += eps;
        let mut xm = x.clone();
        xm.data[i] -= eps;
        let fd = (objective(&model.forward(&xp, mode), &weights) - objective(&model.forward(&xm, mode), &weights))
            / (2.0 * eps);
        let err = (fd - dx.data[i]).abs() / fd.abs().max(dx.data[i].abs()).max(1e-6);
        assert!(
            err < 1e-4,
            "input[{i}] in {mode:?}: analytic {} vs numeric {fd}",
            dx.data[i]
        );
    }
}

#[test]
fn segmentation_gradients_match_finite_differences() {
    let cfg = ModelConfig::new(Preset::Tiny, 3, HeadKind::Segmentation);
    check_model_gradients(&cfg, Mode::Train);
    check_model_gradients(&cfg, Mode::Eval);
}

#[test]
fn dilated_segmentation_gradients_match_finite_differences() {
    let mut cfg = ModelConfig::new(Preset::Tiny, 2, HeadKind::Segmentation);
    cfg.output_stride = 4;
    cfg.head_dilations = vec![1, 2];
    check_model_gradients(&cfg, Mode::Train);
}

#[test]
fn classification_gradients_match_finite_differences() {
    let cfg = ModelConfig::new(Preset::Tiny, 4, HeadKind::Classification);
    check_model_gradients(&cfg, Mode::Train);
    check_model_gradients(&cfg, Mode::Eval);
}

#[test]
fn output_shapes() {
    let seg = build_segmentation_model::<f32>(&ModelConfig::new(Preset::Tiny, 5, HeadKind::Segmentation), 0).unwrap();
    let feats = seg.backbone.infer(&random_input(1, 64, 64, 0));
    assert_eq!(feats.shape(), [1, 64, 8, 8]);
    assert_eq!(seg.infer(&random_input(2, 64, 64, 0)).shape(), [2, 5, 64, 64]);
    for (h, w) in [(96, 96), (150, 150), (33, 47)] {
        assert_eq!(seg.infer(&random_input(1, h, w, 0)).shape(), [1, 5, h, w]);
    }
    let cls =
        build_classification_model::<f32>(&ModelConfig::new(Preset::Tiny, 7, HeadKind::Classification), 0).unwrap();
    assert_eq!(cls.infer(&random_input(3, 48, 48, 0)).shape(), [3, 7, 1, 1]);
}

#[test]
fn output_stride_controls_feature_resolution() {
    for (os, side) in [(8, 8), (4, 16), (2, 32)] {
        let mut cfg = ModelConfig::new(Preset::Tiny, 2, HeadKind::Segmentation);
        cfg.output_stride = os;
        let bb = build_backbone::<f32>(&cfg, 0).unwrap();
        assert_eq!(bb.infer(&random_input(1, 64, 64, 1)).shape(), [1, 64, side, side]);
    }
    let mut cfg = ModelConfig::new(Preset::Tiny, 2, HeadKind::Segmentation);
    cfg.output_stride = 16;
    assert!(build_backbone::<f32>(&cfg, 0).is_err());
}

#[test]
fn parameter_counts_follow_the_preset_table() {
    // stem 3·16·9 + bn 32; stage 1: 2·(16·16·9) + 2·32;
    // stage 2: 16·32·9 + 32·32·9 + 16·32 + 3·64; stage 3: 32·64·9 + 64·64·9 + 32·64 + 3·128.
    let backbone = 432 + 32 + (2 * 2304 + 64) + (4608 + 9216 + 512 + 192) + (18432 + 36864 + 2048 + 384);
    assert_eq!(backbone, 77_392);
    let seg = build_segmentation_model::<f32>(&ModelConfig::new(Preset::Tiny, 2, HeadKind::Segmentation), 0).unwrap();
    assert_eq!(seg.backbone_parameters(), backbone);
    assert_eq!(seg.num_parameters(), backbone + 64 * 2 * 9 + 2);
    let cls =
        build_classification_model::<f32>(&ModelConfig::new(Preset::Tiny, 4, HeadKind::Classification), 0).unwrap();
    assert_eq!(cls.num_parameters(), backbone + 64 * 4 + 4);
}

#[test]
fn resnet34_like_backbone_matches_reference_size() {
    // Reference ResNet-34 without its classifier: 21,797,672 − (512·1000 + 1000).
    let cfg = ModelConfig::new(Preset::Resnet34Like, 21, HeadKind::Segmentation);
    let bb = build_backbone::<f32>(&cfg, 0).unwrap();
    let mut params = Vec::new();
    scribble_transfer::nn::Module::collect_params(&bb, "backbone", &mut params);
    let n: usize = params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.len()).sum();
    assert_eq!(n, 21_284_672);
}

#[test]
fn construction_is_deterministic() {
    let cfg = ModelConfig::new(Preset::Tiny, 3, HeadKind::Segmentation);
    let a = build_segmentation_model::<f32>(&cfg, 42).unwrap();
    let b = build_segmentation_model::<f32>(&cfg, 42).unwrap();
    let c = build_segmentation_model::<f32>(&cfg, 43).unwrap();
    let x = random_input(1, 32, 32, 3);
    assert_eq!(a.infer(&x).data, b.infer(&x).data);
    assert_ne!(a.infer(&x).data, c.infer(&x).data);
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    let mut m = build_segmentation_model::<f32>(&ModelConfig::new(Preset::Tiny, 3, HeadKind::Segmentation), 1).unwrap();
    let y = m.forward(&random_input(2, 32, 32, 2), Mode::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dy = Tensor::from_vec(
        y.n,
        y.c,
        y.h,
        y.w,
        (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    m.zero_grad();
    m.backward(&dy);
    for (name, p) in m.params() {
        if p.trainable {
            assert!(p.grad.iter().any(|&g| g != 0.0), "{name} got no gradient");
        } else {
            assert!(p.grad.iter().all(|&g| g == 0.0));
        }
    }
}

#[test]
fn pooled_logits_nearly_invariant_to_stride_shift() {
    let m = build_classification_model::<f32>(&ModelConfig::new(Preset::Tiny, 4, HeadKind::Classification), 8).unwrap();
    let x = random_input::<f32>(1, 64, 64, 9);
    let shift = Preset::Tiny.natural_stride();
    let mut rolled = Tensor::zeros(1, 3, 64, 64);
    for c in 0..3 {
        for r in 0..64 {
            for col in 0..64 {
                rolled.data[(c * 64 + r) * 64 + (col + shift) % 64] = x.data[(c * 64 + r) * 64 + col];
            }
        }
    }
    let a = m.infer(&x).data;
    let b = m.infer(&rolled).data;
    let diff: f32 = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f32>().sqrt();
    let norm: f32 = a.iter().map(|u| u * u).sum::<f32>().sqrt();
    assert!(diff / norm < 0.1, "relative change {}", diff / norm);
}

#[test]
fn backbone_names_identical_across_settings() {
    let seg = build_segmentation_model::<f32>(&ModelConfig::new(Preset::Tiny, 5, HeadKind::Segmentation), 0).unwrap();
    let cls =
        build_classification_model::<f32>(&ModelConfig::new(Preset::Tiny, 9, HeadKind::Classification), 0).unwrap();
    let names = |m: &Model<f32>| -> BTreeSet<(String, Vec<usize>)> {
        m.params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("backbone."))
            .map(|(n, p)| (n, p.shape.clone()))
            .collect()
    };
    assert_eq!(names(&seg), names(&cls));
    assert!(seg
        .params()
        .iter()
        .all(|(n, _)| n.starts_with("backbone.") || n.starts_with("head.")));
}

#[test]
fn transfer_copies_backbone_bitwise_and_leaves_head_fresh() {
    let src_cfg = ModelConfig::new(Preset::Tiny, 5, HeadKind::Segmentation);
    let mut src = build_segmentation_model::<f32>(&src_cfg, 1).unwrap();
    // Move the source away from any initialization.
    for (_, p) in src.params_mut() {
        for (i, v) in p.value.iter_mut().enumerate() {
            *v += (i % 7) as f32 * 0.01;
        }
    }
    let ckpt = src.to_checkpoint(meta(Setting::ScribbleSeg));
    let dst_cfg = ModelConfig::new(Preset::Tiny, 2, HeadKind::Classification);
    let dst = transfer_backbone_weights(Some(&ckpt), &dst_cfg, 7).unwrap();
    let fresh = build_classification_model::<f32>(&dst_cfg, 7).unwrap();
    for (name, p) in dst.params() {
        if name.starts_with("backbone.") {
            let bits: Vec<u32> = p.value.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = ckpt.params[&name].data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, want, "{name}");
        }
    }
    let head = |m: &Model<f32>| {
        m.params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("head."))
            .map(|(_, p)| p.value.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(head(&dst), head(&fresh));

    let random = transfer_backbone_weights(None, &dst_cfg, 7).unwrap();
    let x = random_input(1, 32, 32, 0);
    assert_eq!(random.infer(&x).data, fresh.infer(&x).data);
}

#[test]
fn transfer_rejects_mismatched_sources() {
    let src = build_segmentation_model::<f32>(&ModelConfig::new(Preset::Tiny, 5, HeadKind::Segmentation), 1).unwrap();
    let mut ckpt = src.to_checkpoint(meta(Setting::FullSeg));
    ckpt.meta.preset = "resnet34-like".into();
    let dst_cfg = ModelConfig::new(Preset::Tiny, 2, HeadKind::Classification);
    assert!(matches!(
        transfer_backbone_weights(Some(&ckpt), &dst_cfg, 0),
        Err(Error::Transfer { .. })
    ));

    let mut ckpt = src.to_checkpoint(meta(Setting::FullSeg));
    ckpt.params.get_mut("backbone.stem.conv.weight").unwrap().shape = vec![16, 3, 9];
    ckpt.params.remove("backbone.layer3.0.bn1.running_var");
    match transfer_backbone_weights(Some(&ckpt), &dst_cfg, 0) {
        Err(Error::Transfer { names, .. }) => {
            assert!(names.contains(&"backbone.stem.conv.weight".to_string()));
            assert!(names.contains(&"backbone.layer3.0.bn1.running_var".to_string()));
        }
        other => panic!("expected transfer error, got {other:?}"),
    }
}

#[test]
fn checkpoint_file_round_trip_restores_outputs() {
    let cfg = ModelConfig::new(Preset::Tiny, 3, HeadKind::Segmentation);
    let mut m = build_segmentation_model::<f32>(&cfg, 5).unwrap();
    m.forward(&random_input(2, 32, 32, 1), Mode::Train);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.to_checkpoint(meta(Setting::FullSeg)).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.meta, meta(Setting::FullSeg));
    let restored = Model::from_checkpoint(&cfg, &loaded).unwrap();
    let x = random_input(1, 40, 40, 2);
    assert_eq!(m.infer(&x).data, restored.infer(&x).data);
}
