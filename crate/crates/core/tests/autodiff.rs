use proptest::prelude::*;
use volmim_core::rng;
use volmim_core::tensor::{finite_diff_check, op_cases, probe, Op, OpAttrs, OpKind};
use volmim_core::{Error, Graph, Tensor, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng::seeded(seed, 0);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng::uniform(&mut r, lo, hi)).collect(),
    )
    .unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

    let a = random(&[3, 4], 1, -1.0, 1.0);
    let i3 = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let out = g.matmul(i3, av).unwrap();
    assert_eq!(g.value(out), &a);
}

#[test]
fn softmax_of_constant_row_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[4]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.25; 4]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(random(&[2, 3, 2], 4, -1.0, 1.0));
    let w = g.param(Tensor::ones(&[5]));
    let loss = g.sum(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3, 2]));
    assert_eq!(grads.get(w).unwrap(), &Tensor::zeros(&[5]));

    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[3]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    let mut other = Graph::new();
    let y = other.param(Tensor::scalar(1.0));
    assert!(matches!(g.backward(y), Err(Error::ForeignNode(_))));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::ones(&[2, 3]));
    let b = g.constant(Tensor::ones(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    assert!(matches!(
        Op::from_name("convolve", &OpAttrs::default()),
        Err(Error::UnknownOp(_))
    ));
    assert_eq!("gather-rows".parse::<OpKind>().unwrap(), OpKind::GatherRows);
}

#[test]
fn finite_diff_examples() {
    let x = random(&[4, 5], 2, -2.0, 2.0);
    let err = finite_diff_check(|g, v| g.sum(v), &x, 1e-5, 20, 0).unwrap();
    assert!(err < 1e-9);
    let err = finite_diff_check(
        |g, v| {
            let y = g.gelu(v)?;
            g.sum(y)
        },
        &x,
        1e-5,
        20,
        0,
    )
    .unwrap();
    assert!(err < 1e-4, "gelu {err}");
    let w = random(&[5], 3, -1.0, 1.0);
    let err = finite_diff_check(
        |g, v| {
            let y = g.layernorm(v, None)?;
            let wv = g.constant(w.clone());
            let y = g.mul(y, wv)?;
            g.sum(y)
        },
        &x,
        1e-5,
        20,
        0,
    )
    .unwrap();
    assert!(err < 1e-4, "layernorm {err}");
    assert!(finite_diff_check(|g, v| g.sum(v), &x, 0.5, 20, 0).is_err());
}

#[test]
fn transpose_conv_matches_direct_definition() {
    let x = random(&[8, 3], 5, -1.0, 1.0); // 2x2x2 grid, 3 channels
    let w = random(&[3, 8 * 2], 6, -1.0, 1.0); // stride 2, 2 out channels
    let b = t(&[2], &[0.5, -0.25]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (
        g.constant(x.clone()),
        g.constant(w.clone()),
        g.constant(b.clone()),
    );
    let y = g.transpose_conv3d(xv, wv, bv, [2, 2, 2], 2).unwrap();
    assert_eq!(g.shape(y), [64, 2]);
    let yd = g.value(y).data().to_vec();
    for oz in 0..4 {
        for oy in 0..4 {
            for ox in 0..4 {
                let v = ((oz / 2) * 2 + oy / 2) * 2 + ox / 2;
                let koff = ((oz % 2) * 2 + oy % 2) * 2 + ox % 2;
                for co in 0..2 {
                    let mut expect = b.data()[co];
                    for ci in 0..3 {
                        expect += x.data()[v * 3 + ci] * w.data()[ci * 16 + koff * 2 + co];
                    }
                    let o = (oz * 4 + oy) * 4 + ox;
                    assert!((yd[o * 2 + co] - expect).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn every_differentiable_op_passes_gradient_check() {
    let cases = op_cases();
    let covered: std::collections::HashSet<OpKind> = cases.iter().map(|(k, _)| *k).collect();
    for kind in OpKind::all() {
        assert!(covered.contains(&kind), "no gradient case for {kind}");
    }

    for (kind, build) in &cases {
        for trial in 0..20u64 {
            let x = random(&[4, 6], 100 + trial, -2.0, 2.0);
            let f = |g: &mut Graph, v: Var| {
                let y = build(g, v)?;
                probe(g, y, 7 + trial)
            };
            let err = finite_diff_check(f, &x, 1e-5, 24, trial).unwrap();
            assert!(err < 1e-4, "{kind} trial {trial}: {err}");
        }
    }

    // gradients also reach the non-input operands
    let w = random(&[6, 3], 13, -1.0, 1.0);
    let bias = random(&[3], 14, -1.0, 1.0);
    let table = random(&[7, 6], 15, -1.0, 1.0);
    let conv_w = random(&[6, 8 * 2], 16, -1.0, 1.0);
    let x = random(&[4, 6], 3, -1.0, 1.0);
    let err = finite_diff_check(
        |g, wv| {
            let xv = g.constant(x.clone());
            let b = g.constant(bias.clone());
            let y = g.linear(xv, wv, Some(b))?;
            probe(g, y, 1)
        },
        &w,
        1e-5,
        18,
        0,
    )
    .unwrap();
    assert!(err < 1e-4);
    let err = finite_diff_check(
        |g, tv| {
            let xv = g.constant(x.clone());
            let y = g.embedding_add(xv, tv, &[1, 1, 4, 2])?;
            probe(g, y, 2)
        },
        &table,
        1e-5,
        42,
        0,
    )
    .unwrap();
    assert!(err < 1e-4);
    let xs = random(&[8, 6], 21, -1.0, 1.0);
    let err = finite_diff_check(
        |g, wv| {
            let xv = g.constant(xs.clone());
            let b = g.constant(Tensor::zeros(&[2]));
            let y = g.transpose_conv3d(xv, wv, b, [2, 2, 2], 2)?;
            probe(g, y, 3)
        },
        &conv_w,
        1e-5,
        40,
        0,
    )
    .unwrap();
    assert!(err < 1e-4);
}

#[test]
fn graph_replay_is_bitwise_identical() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(random(&[5, 6], 9, -1.0, 1.0));
        let w = g.param(random(&[6, 6], 10, -1.0, 1.0));
        let y = g.linear(x, w, None).unwrap();
        let y = g.gelu(y).unwrap();
        let y = g.layernorm(y, None).unwrap();
        let y = g.softmax(y, 1).unwrap();
        let l = probe(&mut g, y, 3).unwrap();
        let grads = g.backward(l).unwrap();
        (
            g.value(l).clone(),
            grads.get(x).unwrap().clone(),
            grads.get(w).unwrap().clone(),
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data()[0].to_bits(), b.0.data()[0].to_bits());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

proptest! {
    #[test]
    fn apply_never_mutates_operands(seed in 0u64..1000) {
        let a = random(&[3, 4], seed, -3.0, 3.0);
        let b = random(&[4], seed + 1, -3.0, 3.0);
        let mut g = Graph::new();
        let (av, bv) = (g.param(a.clone()), g.param(b.clone()));
        let s = g.add(av, bv).unwrap();
        let m = g.softmax(s, 1).unwrap();
        let l = g.layernorm(m, None).unwrap();
        let _ = g.gelu(l).unwrap();
        prop_assert_eq!(g.value(av), &a);
        prop_assert_eq!(g.value(bv), &b);
    }

    #[test]
    fn reshape_roundtrip(seed in 0u64..1000) {
        let a = random(&[2, 3, 4], seed, -1.0, 1.0);
        let mut g = Graph::new();
        let v = g.constant(a.clone());
        let r = g.reshape(v, &[4, 6]).unwrap();
        let back = g.reshape(r, &[2, 3, 4]).unwrap();
        prop_assert_eq!(g.value(back), &a);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let a = random(&[3, 7], seed, -10.0, 10.0);
        let mut g = Graph::new();
        let v = g.constant(a.clone());
        let s = g.softmax(v, 1).unwrap();
        let shifted = g.constant(a.map(|x| x + shift));
        let s2 = g.softmax(shifted, 1).unwrap();
        for r in 0..3 {
            let row = &g.value(s).data()[r * 7..(r + 1) * 7];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(g.value(s).max_abs_diff(g.value(s2)) < 1e-12);
    }
}
