use volmim_core::models::{
    encode, encode_tensor, mae_forward, simclr_forward, simmim_forward, unetr_logits,
    unetr_segment, Checkpoint, Method, ModelConfig, Parameters,
};
use volmim_core::objectives::{masked_recon_loss, ReconNorm};
use volmim_core::patch::{
    patchify, positional_encoding, sample_mask, Mask, MaskingConfig, PatchGrid,
};
use volmim_core::rng;
use volmim_core::tensor::{finite_diff_check, Graph, Tensor};
use volmim_core::volume::{synth_generate, Volume};

fn small_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.vit.embed_dim = 24;
    cfg.vit.num_heads = 2;
    cfg.vit.token_patch = 4;
    cfg.decoder.decoder_dim = 12;
    cfg.simclr.proj_hidden = 16;
    cfg.simclr.proj_dim = 8;
    cfg.seg.feature_size = 4;
    cfg.seg.num_classes = 3;
    cfg
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed, 99);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng::normal(&mut r)).collect(),
    )
    .unwrap()
}

fn volume16(seed: u64) -> Volume {
    synth_generate(seed, 1, [16, 16, 16], 3)
        .unwrap()
        .remove(0)
        .0
}

#[test]
fn depth_zero_is_norm_of_embedding() {
    let mut cfg = small_cfg();
    cfg.vit.depth = 0;
    let p = Parameters::init(&cfg, Method::Simmim, 1).unwrap();
    let tokens = random_tensor(&[5, 64], 2);
    let pos = random_tensor(&[5, 24], 3);
    let out = encode_tensor(&cfg.vit, &p, &tokens, &pos).unwrap();

    let mut g = Graph::new();
    let t = g.constant(tokens);
    let w = g.constant(p.get("encoder.patch_embed.weight").unwrap().clone());
    let b = g.constant(p.get("encoder.patch_embed.bias").unwrap().clone());
    let e = g.linear(t, w, Some(b)).unwrap();
    let pv = g.constant(pos);
    let x = g.add(e, pv).unwrap();
    let gw = g.constant(p.get("encoder.norm.weight").unwrap().clone());
    let gb = g.constant(p.get("encoder.norm.bias").unwrap().clone());
    let y = g.layernorm(x, Some((gw, gb))).unwrap();
    assert_eq!(g.value(y), &out);
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let cfg = small_cfg();
    let p = Parameters::init(&cfg, Method::Simmim, 4).unwrap();
    let tokens = random_tensor(&[8, 64], 5);
    let zeros = Tensor::zeros(&[8, 24]);
    let out = encode_tensor(&cfg.vit, &p, &tokens, &zeros).unwrap();
    let perm = [3, 0, 7, 1, 6, 2, 5, 4];
    let shuffled = tokens.gather_rows(&perm).unwrap();
    let out2 = encode_tensor(&cfg.vit, &p, &shuffled, &zeros).unwrap();
    assert_eq!(out2.shape(), &[8, 24]);
    assert!(out2.max_abs_diff(&out.gather_rows(&perm).unwrap()) < 1e-12);
}

#[test]
fn encoder_rejects_dimension_mismatch() {
    let cfg = small_cfg();
    let p = Parameters::init(&cfg, Method::Simmim, 4).unwrap();
    let mut g = Graph::new();
    let pv = p.bind(&mut g);
    let t = g.constant(Tensor::zeros(&[4, 63]));
    let pos = g.constant(Tensor::zeros(&[4, 24]));
    assert!(encode(&mut g, &cfg.vit, &pv, t, pos).is_err());
}

#[test]
fn mae_sequence_lengths_and_empty_mask() {
    let cfg = ModelConfig::tiny();
    let p = Parameters::init(&cfg, Method::Mae, 0).unwrap();
    let v = synth_generate(1, 1, [48, 48, 48], 3).unwrap().remove(0).0;
    let grid = PatchGrid::for_volume(&v, 8).unwrap();
    let mask = sample_mask(
        &grid,
        &MaskingConfig {
            masked_patch: 8,
            ratio: 0.75,
        },
        &mut rng::seeded(2, 0),
    )
    .unwrap();
    assert_eq!(mask.len(), 162);
    let mut g = Graph::new();
    let pv = p.bind(&mut g);
    let out = mae_forward(&mut g, &cfg, &pv, &v, &mask).unwrap();
    assert_eq!((out.encoder_len, out.decoder_len), (54, 216));
    assert_eq!(g.shape(out.pred), &[216, 512]);
    assert_eq!(out.reconstruction(&g).unwrap().shape(), [1, 48, 48, 48]);
    let err = mae_forward(&mut g, &cfg, &pv, &v, &Mask::empty(216)).unwrap_err();
    assert!(err.to_string().contains("no masked patches to reconstruct"));
    assert!(simmim_forward(&mut g, &cfg, &pv, &v, &Mask::empty(216)).is_err());
}

#[test]
fn mae_loss_against_own_prediction_is_zero() {
    let cfg = small_cfg();
    let p = Parameters::init(&cfg, Method::Mae, 7).unwrap();
    let v = volume16(3);
    let mask = Mask::new(vec![0, 5, 9, 63], 64).unwrap();
    let mut g = Graph::new();
    let pv = p.bind(&mut g);
    let out = mae_forward(&mut g, &cfg, &pv, &v, &mask).unwrap();
    let own = g.value(out.pred).clone();
    let l = masked_recon_loss(&mut g, out.pred, &own, &mask, ReconNorm::L1).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    assert!(g.value(out.loss).item() > 0.0);
}

#[test]
fn simmim_full_sequence_and_prediction_width() {
    let cfg = small_cfg();
    let p = Parameters::init(&cfg, Method::Simmim, 7).unwrap();
    let v = volume16(4);
    let mask = Mask::new(vec![1, 2, 3], 64).unwrap();
    let mut g = Graph::new();
    let pv = p.bind(&mut g);
    let out = simmim_forward(&mut g, &cfg, &pv, &v, &mask).unwrap();
    assert_eq!(out.encoder_len, 64);
    assert_eq!(g.shape(out.pred), &[64, 64]);
    assert_eq!(ModelConfig::vit3d_base().token_dim(), 4096);
}

#[test]
fn simmim_full_mask_rows_differ_only_through_positions() {
    let mut cfg = small_cfg();
    cfg.vit.pos_embed = volmim_core::models::PosEmbed::Learned { grid: [4, 4, 4] };
    let mut p = Parameters::init(&cfg, Method::Simmim, 8).unwrap();
    let v = volume16(5);
    let full = Mask::new((0..64).collect(), 64).unwrap();
    let run = |p: &Parameters| {
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let out = simmim_forward(&mut g, &cfg, &pv, &v, &full).unwrap();
        g.value(out.pred).clone()
    };
    let with_pos = run(&p);
    let rows = with_pos.data().chunks(64).collect::<Vec<_>>();
    assert!(rows.windows(2).any(|w| w[0] != w[1]));
    *p.get_mut("encoder.pos_embed").unwrap() = Tensor::zeros(&[64, 24]);
    let without = run(&p);
    let first = &without.data()[..64];
    for row in without.data().chunks(64) {
        let d = row
            .iter()
            .zip(first)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-12, "{d}");
    }
}

#[test]
fn masked_losses_ignore_visible_voxels() {
    let cfg = small_cfg();
    for method in [Method::Mae, Method::Simmim] {
        let p = Parameters::init(&cfg, method, 11).unwrap();
        let v = volume16(6);
        let mask = Mask::new(vec![0, 1, 2, 3, 20, 40], 64).unwrap();
        let forward = |v: &Volume| {
            let mut g = Graph::new();
            let pv = p.bind(&mut g);
            let out =
                volmim_core::models::mim_forward(&mut g, method, &cfg, &pv, v, &mask).unwrap();
            (g.value(out.pred).clone(), out.target)
        };
        let (pred, target) = forward(&v);
        let base =
            volmim_core::objectives::masked_recon_loss_value(&pred, &target, &mask, ReconNorm::L1)
                .unwrap();
        let mut perturbed = target.clone();
        for r in mask.visible() {
            for x in &mut perturbed.data_mut()[r * 64..(r + 1) * 64] {
                *x += 3.5;
            }
        }
        let l = volmim_core::objectives::masked_recon_loss_value(
            &pred,
            &perturbed,
            &mask,
            ReconNorm::L1,
        )
        .unwrap();
        assert_eq!(base.to_bits(), l.to_bits());
    }
}

#[test]
fn simclr_loss_is_finite_and_needs_two() {
    let cfg = small_cfg();
    let p = Parameters::init(&cfg, Method::Simclr, 2).unwrap();
    let a: Vec<Volume> = (0..2).map(volume16).collect();
    let b: Vec<Volume> = a.iter().map(|v| v.scaled(1.05)).collect();
    let mut g = Graph::new();
    let pv = p.bind(&mut g);
    let l = simclr_forward(&mut g, &cfg, &pv, &a, &b).unwrap();
    let v = g.value(l).item();
    assert!(v.is_finite() && v >= 0.0);
    assert!(simclr_forward(&mut g, &cfg, &pv, &a[..1], &b[..1]).is_err());
}

#[test]
fn unetr_shapes_and_live_gradients() {
    let cfg = small_cfg();
    let p = Parameters::init(&cfg, Method::Segmentation, 3).unwrap();
    let v = volume16(7);
    let logits = unetr_segment(&cfg, &p, &v).unwrap();
    assert_eq!(logits.shape(), &[3, 16, 16, 16]);

    let mut g = Graph::new();
    let pv = p.bind(&mut g);
    let l = unetr_logits(&mut g, &cfg, &pv, &v).unwrap();
    let w = g.constant(random_tensor(&[4096, 3], 1));
    let prod = g.mul(l, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    for (name, var) in pv.iter() {
        let gt = grads.get(var).unwrap();
        assert!(
            gt.data().iter().any(|&x| x != 0.0),
            "dead gradient for {name}"
        );
    }
    let mut bad = cfg.clone();
    bad.vit.depth = 3;
    assert!(Parameters::init(&bad, Method::Segmentation, 0).is_err());
    let odd = Volume::zeros([1, 16, 16, 18]);
    assert!(unetr_segment(&cfg, &p, &odd).is_err());
}

#[test]
fn composed_forward_matches_finite_differences() {
    let mut cfg = small_cfg();
    cfg.vit.depth = 1;
    let p = Parameters::init(&cfg, Method::Simmim, 5).unwrap();
    let v = volume16(8);
    let mask = Mask::new(vec![0, 7, 30], 64).unwrap();
    let (tokens, grid) = patchify(&v, 4).unwrap();
    let pos = positional_encoding(&grid, 24).unwrap();
    let w0 = p.get("encoder.patch_embed.weight").unwrap().clone();
    let err = finite_diff_check(
        |g, w| {
            let pv = p.bind_frozen(g);
            let t = g.constant(tokens.clone());
            let e = g.linear(t, w, Some(pv.get("encoder.patch_embed.bias")?))?;
            let ps = g.constant(pos.clone());
            let x = g.add(e, ps)?;
            let (lat, _) = volmim_core::models::encode_embedded(g, &cfg.vit, &pv, x, &[])?;
            let head_w = pv.get("simmim.head.weight")?;
            let head_b = pv.get("simmim.head.bias")?;
            let pred = g.linear(lat, head_w, Some(head_b))?;
            masked_recon_loss(g, pred, &tokens, &mask, ReconNorm::L2)
        },
        &w0,
        1e-5,
        20,
        9,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn initialization_and_checkpoints_are_reproducible() {
    let cfg = small_cfg();
    let a = Parameters::init(&cfg, Method::Mae, 42).unwrap();
    let b = Parameters::init(&cfg, Method::Mae, 42).unwrap();
    let bits = |p: &Parameters| -> Vec<u64> {
        p.iter()
            .flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    let count = a.count();
    assert_eq!(
        count,
        Parameters::init(&cfg, Method::Mae, 43).unwrap().count()
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = Checkpoint::new(Method::Mae, cfg, 0, 42, a);
    ck.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    Checkpoint::load(&path).unwrap().save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}
