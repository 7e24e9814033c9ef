use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, OpKind, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences on up to `probes` sampled coordinates.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, probes: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::Invalid(format!("step {h} outside (0, 1e-2]")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let out = f(&mut g, v)?;
        let val = g.value(out).item();
        if !val.is_finite() {
            return Err(Error::NonFinite("f(x) in finite-difference check".into()));
        }
        Ok(val)
    };

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite("f(x) in finite-difference check".into()));
    }
    let grads = g.backward(out)?;
    let analytic = grads.get(v).expect("leaf gradient").clone();

    let coords: Vec<usize> = if probes >= x.len() {
        (0..x.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = index::sample(&mut rng, x.len(), probes).into_vec();
        c.sort_unstable();
        c
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

pub type Build = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng::seeded(seed, 0);
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng::uniform(&mut r, lo, hi)).collect(),
    )
}

/// Uniform `[lo, hi)` tensor drawn from a fixed stream of `seed`.
pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    random(shape, seed, lo, hi)
}

/// Weighted sum with fixed random weights so that every output element
/// carries a distinct cotangent.
pub fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = random(g.shape(y), seed, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// At least one builder per differentiable op kind, each taking a `[4, 6]` input.
#[rustfmt::skip]
pub fn op_cases() -> Vec<(OpKind, Build)> {
    let other = random(&[4, 6], 11, 0.5, 1.5);
    let row = random(&[6], 12, -1.0, 1.0);
    let w = random(&[6, 3], 13, -1.0, 1.0);
    let bias = random(&[3], 14, -1.0, 1.0);
    let table = random(&[7, 6], 15, -1.0, 1.0);
    let conv_w = random(&[6, 8 * 2], 16, -1.0, 1.0);
    let mut cases: Vec<(OpKind, Build)> = Vec::new();
    let o = other.clone();
    cases.push((OpKind::Add, Box::new(move |g, x| { let c = g.constant(o.clone()); g.add(x, c) })));
    let r = row.clone();
    cases.push((OpKind::Sub, Box::new(move |g, x| { let c = g.constant(r.clone()); g.sub(c, x) })));
    let o = other.clone();
    cases.push((OpKind::Mul, Box::new(move |g, x| { let c = g.constant(o.clone()); g.mul(x, c) })));
    let o = other.clone();
    cases.push((OpKind::Div, Box::new(move |g, x| { let c = g.constant(o.clone()); let a = g.div(x, c)?; let b = g.div(c, a)?; g.add(a, b) })));
    cases.push((OpKind::Scale, Box::new(|g, x| g.scale(x, -1.7))));
    let ww = w.clone();
    cases.push((OpKind::MatMul, Box::new(move |g, x| {
        let c = g.constant(ww.clone());
        let y = g.matmul(x, c)?;
        let yt = g.permute(y, &[1, 0])?;
        let z = g.matmul(yt, x)?;
        let z3 = g.reshape(z, &[1, 3, 6])?;
        let xt = g.permute(x, &[1, 0])?;
        let xt3 = g.reshape(xt, &[1, 6, 4])?;
        g.matmul(z3, xt3)
    })));
    cases.push((OpKind::Reshape, Box::new(|g, x| g.reshape(x, &[2, 12]))));
    cases.push((OpKind::Permute, Box::new(|g, x| { let y = g.reshape(x, &[2, 2, 6])?; g.permute(y, &[2, 0, 1]) })));
    cases.push((OpKind::Concat, Box::new(|g, x| { let y = g.scale(x, 2.0)?; g.concat(&[x, y, x], 1) })));
    cases.push((OpKind::Slice, Box::new(|g, x| g.slice(x, 1, 1, 5))));
    cases.push((OpKind::GatherRows, Box::new(|g, x| g.gather_rows(x, &[3, 0, 3, 1]))));
    cases.push((OpKind::ScatterRows, Box::new(|g, x| g.scatter_rows(x, &[5, 0, 2, 6], 8))));
    cases.push((OpKind::Softmax, Box::new(|g, x| { let a = g.softmax(x, 0)?; let b = g.softmax(x, 1)?; g.add(a, b) })));
    cases.push((OpKind::LogSoftmax, Box::new(|g, x| { let a = g.log_softmax(x, 0)?; let b = g.log_softmax(x, 1)?; g.add(a, b) })));
    let r1 = row.clone();
    let r2 = random(&[6], 17, -1.0, 1.0);
    cases.push((OpKind::LayerNorm, Box::new(move |g, x| { let a = g.constant(r1.clone()); let b = g.constant(r2.clone()); g.layernorm(x, Some((a, b))) })));
    cases.push((OpKind::Gelu, Box::new(|g, x| g.gelu(x))));
    cases.push((OpKind::Abs, Box::new(|g, x| g.abs(x))));
    cases.push((OpKind::Sqrt, Box::new(|g, x| { let y = g.mul(x, x)?; let one = g.constant(Tensor::scalar(0.3)); let y = g.add(y, one)?; g.sqrt(y) })));
    let (ww, bb) = (w.clone(), bias.clone());
    cases.push((OpKind::Linear, Box::new(move |g, x| { let a = g.constant(ww.clone()); let b = g.constant(bb.clone()); g.linear(x, a, Some(b)) })));
    cases.push((OpKind::Mean, Box::new(|g, x| { let a = g.mean_axis(x, 0)?; let m = g.mean(x)?; g.add(a, m) })));
    cases.push((OpKind::Sum, Box::new(|g, x| { let a = g.sum_axis(x, 1)?; let s = g.sum(x)?; g.mul(a, s) })));
    let cw = conv_w.clone();
    cases.push((OpKind::TransposeConv3d, Box::new(move |g, x| { let y = g.reshape(x, &[4, 6])?; let y = g.concat(&[y, y], 0)?; let c = g.constant(cw.clone()); let b = g.constant(Tensor::zeros(&[2])); g.transpose_conv3d(y, c, b, [2, 2, 2], 2) })));
    let tb = table.clone();
    cases.push((OpKind::EmbeddingAdd, Box::new(move |g, x| { let c = g.constant(tb.clone()); g.embedding_add(x, c, &[6, 0, 6, 2]) })));

    cases
}
