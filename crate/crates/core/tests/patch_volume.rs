use std::collections::HashSet;

use proptest::prelude::*;
use volmim_core::patch::{
    patchify, positional_encoding, sample_mask, unpatchify, MaskingConfig, PatchGrid,
};
use volmim_core::rng;
use volmim_core::volume::{
    load_volume, normalize_ct, normalize_zscore, resample, resample_labels, save_volume,
    LabelVolume, Modality, Volume,
};

fn random_volume(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Volume {
    let mut r = rng::seeded(seed, 7);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng::uniform(&mut r, lo, hi)).collect();
    Volume::new(shape, [1.0; 3], Modality::Ct, data).unwrap()
}

#[test]
fn no_center_bias() {
    let grid = PatchGrid::new([7, 5, 6], 1, 1).unwrap();
    let cfg = MaskingConfig {
        masked_patch: 1,
        ratio: 0.3,
    };
    let mut r = rng::seeded(12, 0);
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for _ in 0..10_000 {
        for &t in sample_mask(&grid, &cfg, &mut r).unwrap().masked() {
            let c = grid.coord(t);
            for (s, &x) in sum.iter_mut().zip(&c) {
                *s += x as f64;
            }
            n += 1;
        }
    }
    for (a, (&s, &g)) in sum.iter().zip(&grid.grid).enumerate() {
        let centroid = (g - 1) as f64 / 2.0;
        let mean = s / n as f64;
        assert!(
            (mean - centroid).abs() <= 0.02 * g as f64,
            "axis {a}: {mean} vs {centroid}"
        );
    }
}

#[test]
fn positional_rows_are_distinct_up_to_16_cubed() {
    for edge in [1usize, 2, 5, 16] {
        let grid = PatchGrid::new([edge; 3], 1, 1).unwrap();
        let pe = positional_encoding(&grid, 48).unwrap();
        let rows: HashSet<Vec<u64>> = pe
            .data()
            .chunks(48)
            .map(|r| r.iter().map(|x| x.to_bits()).collect())
            .collect();
        assert_eq!(rows.len(), edge.pow(3));
        assert_eq!(pe, positional_encoding(&grid, 48).unwrap());
    }
}

#[test]
fn zero_tokens_give_zero_volume() {
    let v = Volume::zeros([2, 8, 16, 8]);
    let (t, grid) = patchify(&v, 8).unwrap();
    assert!(t.data().iter().all(|&x| x == 0.0));
    assert_eq!(unpatchify(&t, &grid).unwrap(), v);
}

#[test]
fn volume_file_round_trip_and_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_volume([1, 16, 16, 16], 1, -1.0, 1.0);
    // Payload samples are f32; keep values representable.
    let data: Vec<f64> = v.data().iter().map(|&x| f64::from(x as f32)).collect();
    let v = Volume::new([1, 16, 16, 16], [0.5, 1.0, 2.0], Modality::Mri, data).unwrap();
    let path = dir.path().join("case");
    save_volume(&v, &path).unwrap();
    assert_eq!(
        std::fs::metadata(dir.path().join("case.vol"))
            .unwrap()
            .len(),
        16384
    );
    let back = load_volume(dir.path().join("case.volh")).unwrap();
    assert_eq!(back, v);
}

#[test]
fn resample_spacing_example() {
    let v = Volume::zeros([1, 96, 96, 96]);
    let out = resample(&v, [1.5, 1.5, 2.0]).unwrap();
    assert_eq!(out.extents(), [64, 64, 48]);
}

proptest! {
    #[test]
    fn patchify_round_trip(seed in 0u64..500, c in 1usize..3, gz in 1usize..3, gy in 1usize..3, gx in 1usize..3, p in prop::sample::select(vec![1usize, 2, 4])) {
        let v = random_volume([c, gz * p, gy * p, gx * p], seed, -5.0, 5.0);
        let (t, grid) = patchify(&v, p).unwrap();
        prop_assert_eq!(t.shape(), &[gz * gy * gx, c * p * p * p][..]);
        let back = unpatchify(&t, &grid).unwrap();
        prop_assert_eq!(back.shape(), v.shape());
        prop_assert_eq!(back.data(), v.data());
    }

    #[test]
    fn mask_count_is_exact(seed in 0u64..10_000, p in 1usize..4, m in 1usize..4, cz in 1usize..4, cy in 1usize..4, cx in 1usize..4, ratio in 0.0f64..=1.0) {
        let q = p * m;
        let grid = PatchGrid::new([cz * q, cy * q, cx * q], p, 1).unwrap();
        let cfg = MaskingConfig { masked_patch: q, ratio };
        let mask = sample_mask(&grid, &cfg, &mut rng::seeded(seed, 0)).unwrap();
        let expect = (ratio * (cz * cy * cx) as f64).floor() as usize * m.pow(3);
        prop_assert_eq!(mask.len(), expect);
        prop_assert_eq!(mask.len() + mask.visible().len(), grid.num_tokens());
    }

    #[test]
    fn ct_normalization_stays_in_unit_range(seed in 0u64..1000) {
        let v = random_volume([1, 4, 4, 4], seed, -3000.0, 3000.0);
        let out = normalize_ct(&v, -175.0, 200.0).unwrap();
        prop_assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn zscore_is_idempotent(seed in 0u64..1000, scale in 0.1f64..100.0) {
        let v = random_volume([2, 4, 3, 5], seed, -scale, scale);
        let once = normalize_zscore(&v);
        let twice = normalize_zscore(&once);
        prop_assert!(once.data().iter().zip(twice.data()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn resample_to_same_spacing_is_identity(seed in 0u64..1000) {
        let v = random_volume([1, 5, 6, 7], seed, -1.0, 1.0).with_spacing([0.8, 1.2, 2.0]);
        prop_assert_eq!(resample(&v, [0.8, 1.2, 2.0]).unwrap(), v);
    }

    #[test]
    fn label_resampling_emits_known_ids(seed in 0u64..1000, tz in 0.5f64..3.0, ty in 0.5f64..3.0) {
        let mut r = rng::seeded(seed, 1);
        let ids = [0u16, 2, 5];
        let data: Vec<u16> = (0..6 * 7 * 8).map(|_| ids[rng::below(&mut r, 3)]).collect();
        let l = LabelVolume::new([6, 7, 8], 6, data).unwrap();
        let out = resample_labels(&l, [1.0; 3], [tz, ty, 1.0]).unwrap();
        prop_assert!(out.data().iter().all(|x| ids.contains(x)));
    }
}
