use std::collections::BTreeMap;

use proptest::prelude::*;
use volmim_core::infer::{
    argmax_labels, evaluate, evaluate_with, read_pgm, reconstruct_dump, sliding_window_infer,
    SlidingWindowConfig, MASK_GRAY,
};
use volmim_core::models::{unetr_segment, Checkpoint, Method, ModelConfig, Parameters};
use volmim_core::objectives::DiceReport;
use volmim_core::patch::{sample_mask, MaskingConfig, PatchGrid};
use volmim_core::rng;
use volmim_core::train::{
    adamw_step, crop_origin, finetune, lr_at, pretrain, read_trace, segmentation_params, OptState,
    TrainConfig,
};
use volmim_core::volume::{synth_generate, LabelVolume, Modality, Volume};
use volmim_core::Tensor;

fn small_model() -> ModelConfig {
    let mut m = ModelConfig::tiny();
    m.vit.embed_dim = 24;
    m.vit.num_heads = 2;
    m.decoder.decoder_dim = 12;
    m.seg.feature_size = 4;
    m.seg.num_classes = 3;
    m
}

fn quick(epochs: usize, batch: usize, window: usize) -> TrainConfig {
    TrainConfig {
        base_lr: 1e-3,
        batch_size: batch,
        warmup_epochs: 1,
        total_epochs: epochs,
        window,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn crop_origins_are_uniform_and_seeded() {
    let (extent, window, draws) = (20usize, 8usize, 10_000usize);
    let positions = extent - window + 1;
    let mut counts = vec![0usize; positions];
    let mut r = rng::seeded(5, 0);
    for _ in 0..draws {
        let o = crop_origin([window, window, extent], window, &mut r).unwrap();
        assert_eq!(&o[..2], &[0, 0]);
        counts[o[2]] += 1;
    }
    let p = 1.0 / positions as f64;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        assert!(
            (c as f64 - mean).abs() < 4.0 * sd,
            "position {i}: {c} vs {mean:.1}"
        );
    }
    let a = crop_origin([30, 40, 50], 16, &mut rng::seeded(1, 2)).unwrap();
    let b = crop_origin([30, 40, 50], 16, &mut rng::seeded(1, 2)).unwrap();
    assert_eq!(a, b);
}

fn adam_oracle(w0: f64, grads: &[f64], lrs: &[f64], b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    for (t, (&g, &lr)) in grads.iter().zip(lrs).enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w -= lr * mh / (vh.sqrt() + eps);
    }
    w
}

proptest! {
    #[test]
    fn adamw_without_decay_is_adam(w0 in -3.0f64..3.0, steps in prop::collection::vec((-5.0f64..5.0, 1e-4f64..0.1), 1..30)) {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut params = Parameters::from_map([("w".to_string(), Tensor::new(vec![1], vec![w0]).unwrap())].into_iter().collect());
        let mut state = OptState::default();
        for &(g, lr) in &steps {
            let grads: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::new(vec![1], vec![g]).unwrap())].into_iter().collect();
            adamw_step(&mut params, &grads, &mut state, lr, &cfg).unwrap();
        }
        let (gs, lrs): (Vec<f64>, Vec<f64>) = steps.iter().copied().unzip();
        let expect = adam_oracle(w0, &gs, &lrs, 0.9, 0.999, 1e-8);
        prop_assert!((params.get("w").unwrap().data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_continuous_and_non_negative(warmup in 1usize..50, extra in 1usize..500, base in 1e-5f64..1.0, frac in 0.0f64..1.0) {
        let total = warmup + extra;
        let min = base * frac;
        for s in 0..=total + 3 {
            prop_assert!(lr_at(s, warmup, total, base, min) >= 0.0);
        }
        let before = lr_at(warmup - 1, warmup, total, base, min);
        let at = lr_at(warmup, warmup, total, base, min);
        prop_assert!((at - base).abs() < 1e-15);
        prop_assert!(at - before <= base / warmup as f64 + 1e-15);
        let jump = base / warmup as f64 + std::f64::consts::PI * (base - min) / (2.0 * extra as f64);
        for s in 0..total + 2 {
            prop_assert!((lr_at(s + 1, warmup, total, base, min) - lr_at(s, warmup, total, base, min)).abs() <= jump + 1e-12);
        }
    }
}

#[test]
fn pretrain_trace_length_and_reproducibility() {
    let model = small_model();
    let data: Vec<Volume> = synth_generate(4, 5, [20; 3], 3)
        .unwrap()
        .into_iter()
        .map(|p| p.0)
        .collect();
    let masking = MaskingConfig {
        masked_patch: 8,
        ratio: 0.5,
    };
    let cfg = quick(3, 2, 16);
    let dir = tempfile::tempdir().unwrap();
    let a = pretrain(Method::Mae, &model, &cfg, &masking, &data, Some(dir.path())).unwrap();
    // 5 volumes in batches of 2: 3 steps per epoch.
    assert_eq!(a.trace.len(), 9);
    assert_eq!(
        a.trace.iter().map(|r| r.step).collect::<Vec<_>>(),
        (0..9).collect::<Vec<_>>()
    );
    assert_eq!(
        read_trace(&dir.path().join("trace.jsonl")).unwrap(),
        a.trace
    );
    let b = pretrain(Method::Mae, &model, &cfg, &masking, &data, None).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    let c = pretrain(
        Method::Mae,
        &model,
        &TrainConfig {
            seed: 4,
            ..cfg.clone()
        },
        &masking,
        &data,
        None,
    )
    .unwrap();
    assert_ne!(a.checkpoint.to_bytes(), c.checkpoint.to_bytes());

    let simclr = pretrain(Method::Simclr, &model, &cfg, &masking, &data, None).unwrap();
    assert!(simclr.trace.iter().all(|r| r.loss.is_finite()));

    let nothing = MaskingConfig {
        masked_patch: 16,
        ratio: 0.5,
    };
    assert!(pretrain(Method::Simmim, &model, &cfg, &nothing, &data, None).is_err());
}

#[test]
fn pretrained_and_scratch_differ_only_in_encoder() {
    let model = small_model();
    let params = Parameters::init(&model, Method::Simmim, 9).unwrap();
    let ck = Checkpoint::new(Method::Simmim, model.clone(), 10, 9, params.clone());
    let scratch = segmentation_params(None, &model, 2).unwrap();
    let warm = segmentation_params(Some(&ck), &model, 2).unwrap();
    let names: Vec<&str> = scratch.names().collect();
    assert_eq!(names, warm.names().collect::<Vec<_>>());
    for name in names {
        let same = scratch.get(name) == warm.get(name);
        if name.starts_with("encoder.") {
            assert_eq!(warm.get(name), params.get(name), "{name}");
        } else {
            assert!(same, "{name} differs outside the encoder");
        }
    }
    let mut other = model.clone();
    other.vit.depth = 5;
    assert!(segmentation_params(Some(&ck), &other, 2).is_err());
}

#[test]
fn finetune_records_dice_in_unit_range() {
    let model = small_model();
    let data = synth_generate(8, 3, [16; 3], 3).unwrap();
    let (train, val) = data.split_at(2);
    let swi = SlidingWindowConfig {
        window: 16,
        overlap: 0.5,
    };
    let out = finetune(None, &model, &quick(2, 2, 16), train, val, 1.0, &swi, None).unwrap();
    assert_eq!(out.trace.len(), 2);
    for r in &out.trace {
        let d = r.dice.as_ref().expect("validated every epoch");
        assert!(d
            .per_class
            .values()
            .chain([&d.average])
            .all(|x| (0.0..=1.0).contains(x)));
    }
    assert_eq!(out.checkpoint.meta.method, Method::Segmentation);
    let report = evaluate(&out.checkpoint, val, &swi).unwrap();
    assert_eq!(Some(&report), out.trace.last().unwrap().dice.as_ref());
    assert_eq!(report, evaluate(&out.checkpoint, val, &swi).unwrap());
}

#[test]
fn one_window_equals_direct_call() {
    let model = small_model();
    let params = Parameters::init(&model, Method::Segmentation, 1).unwrap();
    let v = synth_generate(2, 1, [16; 3], 3).unwrap().remove(0).0;
    let swi = SlidingWindowConfig {
        window: 16,
        overlap: 0.5,
    };
    let direct = unetr_segment(&model, &params, &v).unwrap();
    let tiled = sliding_window_infer(|w| unetr_segment(&model, &params, w), &v, &swi).unwrap();
    assert_eq!(direct, tiled);
}

fn one_hot(l: &LabelVolume) -> Tensor {
    let c = l.num_classes();
    let n = l.len();
    let mut data = vec![0.0; c * n];
    for (i, &k) in l.data().iter().enumerate() {
        data[k as usize * n + i] = 1.0;
    }
    let [d, h, w] = l.shape();
    Tensor::new(vec![c, d, h, w], data).unwrap()
}

#[test]
fn oracle_and_constant_predictors() {
    let data = synth_generate(3, 2, [24; 3], 4).unwrap();
    let oracle = evaluate_with(
        |v| {
            let (_, l) = data.iter().find(|(x, _)| x == v).unwrap();
            Ok(l.clone())
        },
        &data,
    )
    .unwrap();
    assert!(oracle.per_class.values().all(|&d| d == 1.0));
    assert_eq!(oracle.average, 1.0);

    // Argmax of one-hot scores gives the labels back.
    let (_, l) = &data[0];
    assert_eq!(&argmax_labels(&one_hot(l)).unwrap(), l);

    let constant = evaluate_with(
        |v| LabelVolume::new(v.extents(), 4, vec![0; v.extents().iter().product()]),
        &data,
    )
    .unwrap();
    assert!(constant.per_class.values().all(|&d| d == 0.0));
    let mean = constant.per_class.values().sum::<f64>() / constant.per_class.len() as f64;
    assert!((constant.average - mean).abs() < 1e-12);
    let mixed = DiceReport::mean(&[oracle.clone(), constant.clone()]).unwrap();
    assert!((mixed.average - 0.5).abs() < 1e-12);
}

#[test]
fn reconstruction_dump_files_and_pixels() {
    let model = small_model();
    let params = Parameters::init(&model, Method::Simmim, 4).unwrap();
    let ck = Checkpoint::new(Method::Simmim, model.clone(), 0, 4, params);
    // Values 0, 1, 3 map to gray 0, 85, 255; none lands on the mask gray.
    let mut r = rng::seeded(6, 0);
    let data: Vec<f64> = (0..16 * 16 * 16)
        .map(|_| [0.0, 1.0, 3.0][rng::below(&mut r, 3)])
        .collect();
    let v = Volume::new([1, 16, 16, 16], [1.0; 3], Modality::Synth, data).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let empty = MaskingConfig {
        masked_patch: 8,
        ratio: 0.0,
    };
    let files = reconstruct_dump(&ck, &v, &empty, &[0, 9], dir.path(), 1).unwrap();
    assert_eq!(files.len(), 6);
    let read = |name: &str| read_pgm(&dir.path().join(name)).unwrap().2;
    assert_eq!(read("slice009_masked.pgm"), read("slice009_original.pgm"));
    assert_eq!(read("slice009_recon.pgm"), read("slice009_original.pgm"));
    assert!(!read("slice009_original.pgm").contains(&MASK_GRAY));

    let half = MaskingConfig {
        masked_patch: 8,
        ratio: 0.5,
    };
    reconstruct_dump(&ck, &v, &half, &[3, 12], dir.path(), 2).unwrap();
    let grid = PatchGrid::for_volume(&v, 8).unwrap();
    let mask = sample_mask(&grid, &half, &mut rng::seeded(2, 0x5eed)).unwrap();
    for z in [3usize, 12] {
        let expect: usize = mask
            .masked()
            .iter()
            .filter(|&&t| grid.coord(t)[0] == z / 8)
            .count()
            * 64;
        let got = read(&format!("slice{z:03}_masked.pgm"))
            .iter()
            .filter(|&&p| p == MASK_GRAY)
            .count();
        assert_eq!(got, expect, "slice {z}");
    }
    assert!(reconstruct_dump(&ck, &v, &half, &[16], dir.path(), 2).is_err());
}
