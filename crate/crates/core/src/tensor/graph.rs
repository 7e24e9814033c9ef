use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels as k;
use super::op::Op;
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) const LAYERNORM_EPS: f64 = 1e-6;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

pub type NodeId = usize;

/// Handle to a node of a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: NodeId,
    graph: u64,
}

impl Var {
    pub fn id(self) -> NodeId {
        self.id
    }
}

enum Saved {
    None,
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
}

struct Node {
    op: Option<Op>,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
    saved: Saved,
}

/// Append-only tape. Nodes are created in topological order, so a reverse
/// sweep visits each exactly once.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every grad-requiring leaf, keyed by node id.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.map.get(&var.id)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.map.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            id: self.nodes.len() - 1,
            graph: self.id,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            requires_grad,
            saved: Saved::None,
        })
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(Error::ForeignNode(v.id));
        }
        Ok(&self.nodes[v.id])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Records `op` applied to `inputs` and returns the result node.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.id].value).collect();
        let (value, saved) = forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        Ok(self.push(Node {
            op: Some(op),
            inputs: inputs.iter().map(|v| v.id).collect(),
            value,
            requires_grad,
            saved,
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale(factor), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Permute(axes.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.apply(Op::GatherRows(rows.to_vec()), &[a])
    }

    pub fn scatter_rows(&mut self, a: Var, indices: &[usize], rows: usize) -> Result<Var> {
        self.apply(
            Op::ScatterRows {
                indices: indices.to_vec(),
                rows,
            },
            &[a],
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::LogSoftmax { axis }, &[a])
    }

    pub fn layernorm(&mut self, x: Var, affine: Option<(Var, Var)>) -> Result<Var> {
        let op = Op::LayerNorm { eps: LAYERNORM_EPS };
        match affine {
            Some((gamma, beta)) => self.apply(op, &[x, gamma, beta]),
            None => self.apply(op, &[x]),
        }
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Abs, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[a])
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        match bias {
            Some(b) => self.apply(Op::Linear, &[x, weight, b]),
            None => self.apply(Op::Linear, &[x, weight]),
        }
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean { axis: None }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum { axis: None }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Mean { axis: Some(axis) }, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Sum { axis: Some(axis) }, &[a])
    }

    pub fn transpose_conv3d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        grid: [usize; 3],
        stride: usize,
    ) -> Result<Var> {
        self.apply(Op::TransposeConv3d { stride, grid }, &[x, weight, bias])
    }

    pub fn embedding_add(&mut self, x: Var, table: Var, indices: &[usize]) -> Result<Var> {
        self.apply(Op::EmbeddingAdd(indices.to_vec()), &[x, table])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.check(loss)?;
        if !node.value.is_scalar() {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Node> = node.inputs.iter().map(|&i| &self.nodes[i]).collect();
            let want: Vec<bool> = inputs.iter().map(|n| n.requires_grad).collect();
            let input_grads = vjp(op, &inputs, node, &g, &want);
            for ((&inp, ig), w) in node.inputs.iter().zip(input_grads).zip(want) {
                let Some(ig) = ig else { continue };
                if !w {
                    continue;
                }
                match &mut grads[inp] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&ig) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
            // keep leaf gradients; interior ones were consumed above
        }
        let mut map = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.op.is_none() && node.requires_grad {
                let data = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                map.insert(id, Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        Ok(Gradients { map })
    }
}

fn same_numel(op: &'static str, shape: &[usize], data_len: usize) -> Result<()> {
    if shape.iter().product::<usize>() != data_len || shape.contains(&0) {
        return Err(Error::operand(
            op,
            format!("cannot reshape {data_len} elements to {shape:?}"),
        ));
    }
    Ok(())
}

fn arity(op: &Op, inputs: &[&Tensor], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(Error::operand(
            op.kind().name(),
            format!("expected {allowed:?} operands, got {}", inputs.len()),
        ))
    }
}

fn check_axis(name: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::operand(
            name,
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    Ok(())
}

fn forward(op: &Op, x: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let name = op.kind().name();
    let plain = |t: Tensor| Ok((t, Saved::None));
    match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            arity(op, x, &[2])?;
            let (a, b) = (x[0], x[1]);
            let out_shape = k::broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
            let n = out_shape.iter().product();
            let mut out = vec![0.0; n];
            let (ad, bd) = (a.data(), b.data());
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |p, q| p + q,
                Op::Sub => |p, q| p - q,
                Op::Mul => |p, q| p * q,
                _ => |p, q| p / q,
            };
            k::for_each_broadcast(a.shape(), b.shape(), &out_shape, |o, ia, ib| {
                out[o] = f(ad[ia], bd[ib]);
            });
            plain(Tensor::from_parts(out_shape, out))
        }
        Op::Scale(c) => {
            arity(op, x, &[1])?;
            plain(x[0].map(|v| v * c))
        }
        Op::MatMul => {
            arity(op, x, &[2])?;
            let (a, b) = (x[0], x[1]);
            let (sa, sb) = (a.shape(), b.shape());
            if sb.len() == 2 && !sa.is_empty() && sa[sa.len() - 1] == sb[0] {
                let kk = sb[0];
                let n = sb[1];
                let m = a.len() / kk;
                let mut shape = sa[..sa.len() - 1].to_vec();
                shape.push(n);
                plain(Tensor::from_parts(
                    shape,
                    k::matmul(a.data(), b.data(), m, kk, n),
                ))
            } else if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1] {
                let (bt, m, kk, n) = (sa[0], sa[1], sa[2], sb[2]);
                let mut out = vec![0.0; bt * m * n];
                for i in 0..bt {
                    k::matmul_acc(
                        &a.data()[i * m * kk..(i + 1) * m * kk],
                        &b.data()[i * kk * n..(i + 1) * kk * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        kk,
                        n,
                    );
                }
                plain(Tensor::from_parts(vec![bt, m, n], out))
            } else {
                Err(Error::shape(name, sa, sb))
            }
        }
        Op::Reshape(shape) => {
            arity(op, x, &[1])?;
            same_numel(name, shape, x[0].len())?;
            plain(Tensor::from_parts(shape.clone(), x[0].data().to_vec()))
        }
        Op::Permute(axes) => {
            arity(op, x, &[1])?;
            let rank = x[0].shape().len();
            let mut sorted = axes.clone();
            sorted.sort_unstable();
            if sorted != (0..rank).collect::<Vec<_>>() {
                return Err(Error::operand(
                    name,
                    format!("{axes:?} is not a permutation of rank {rank}"),
                ));
            }
            let (shape, data) = k::permute(x[0].data(), x[0].shape(), axes);
            plain(Tensor::from_parts(shape, data))
        }
        Op::Concat { axis } => {
            if x.is_empty() {
                return Err(Error::operand(name, "no operands"));
            }
            let first = x[0].shape();
            check_axis(name, first, *axis)?;
            let mut total = 0;
            for t in x {
                let s = t.shape();
                let ok = s.len() == first.len()
                    && s.iter()
                        .zip(first)
                        .enumerate()
                        .all(|(i, (p, q))| i == *axis || p == q);
                if !ok {
                    return Err(Error::shape(name, first, s));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = k::axis_split(first, *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in x {
                    let n = t.shape()[*axis];
                    out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            plain(Tensor::from_parts(shape, out))
        }
        Op::Slice { axis, start, end } => {
            arity(op, x, &[1])?;
            let s = x[0].shape();
            check_axis(name, s, *axis)?;
            if start >= end || *end > s[*axis] {
                return Err(Error::operand(
                    name,
                    format!("range {start}..{end} invalid for extent {}", s[*axis]),
                ));
            }
            let (outer, n, inner) = k::axis_split(s, *axis);
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&x[0].data()[(o * n + start) * inner..(o * n + end) * inner]);
            }
            let mut shape = s.to_vec();
            shape[*axis] = end - start;
            plain(Tensor::from_parts(shape, out))
        }
        Op::GatherRows(rows) => {
            arity(op, x, &[1])?;
            if x[0].shape().is_empty() || rows.is_empty() {
                return Err(Error::operand(
                    name,
                    "needs a ranked operand and at least one row",
                ));
            }
            plain(x[0].gather_rows(rows)?)
        }
        Op::ScatterRows { indices, rows } => {
            arity(op, x, &[1])?;
            let s = x[0].shape();
            if s.is_empty() || s[0] != indices.len() {
                return Err(Error::operand(
                    name,
                    format!("{} indices for operand {s:?}", indices.len()),
                ));
            }
            let mut seen = vec![false; *rows];
            for &i in indices {
                if i >= *rows || seen[i] {
                    return Err(Error::operand(
                        name,
                        format!("index {i} out of range or repeated"),
                    ));
                }
                seen[i] = true;
            }
            let w = x[0].row_width();
            let mut out = vec![0.0; rows * w];
            for (r, &i) in indices.iter().enumerate() {
                out[i * w..(i + 1) * w].copy_from_slice(&x[0].data()[r * w..(r + 1) * w]);
            }
            let mut shape = s.to_vec();
            shape[0] = *rows;
            plain(Tensor::from_parts(shape, out))
        }
        Op::Softmax { axis } | Op::LogSoftmax { axis } => {
            arity(op, x, &[1])?;
            check_axis(name, x[0].shape(), *axis)?;
            let data = if matches!(op, Op::Softmax { .. }) {
                k::softmax_axis(x[0].data(), x[0].shape(), *axis)
            } else {
                k::log_softmax_axis(x[0].data(), x[0].shape(), *axis)
            };
            plain(Tensor::from_parts(x[0].shape().to_vec(), data))
        }
        Op::LayerNorm { eps } => {
            arity(op, x, &[1, 3])?;
            if *eps <= 0.0 {
                return Err(Error::operand(name, "eps must be positive"));
            }
            let s = x[0].shape();
            if s.is_empty() {
                return Err(Error::operand(name, "scalar operand"));
            }
            let d = s[s.len() - 1];
            if x.len() == 3 && (x[1].shape() != [d] || x[2].shape() != [d]) {
                return Err(Error::shape(name, s, x[1].shape()));
            }
            let rows = x[0].len() / d;
            let mut xhat = vec![0.0; x[0].len()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; x[0].len()];
            for r in 0..rows {
                let row = &x[0].data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = if x.len() == 3 {
                        h * x[1].data()[j] + x[2].data()[j]
                    } else {
                        h
                    };
                }
            }
            Ok((
                Tensor::from_parts(s.to_vec(), out),
                Saved::LayerNorm { xhat, rstd },
            ))
        }
        Op::Gelu => {
            arity(op, x, &[1])?;
            plain(x[0].map(k::gelu))
        }
        Op::Abs => {
            arity(op, x, &[1])?;
            plain(x[0].map(f64::abs))
        }
        Op::Sqrt => {
            arity(op, x, &[1])?;
            plain(x[0].map(f64::sqrt))
        }
        Op::Linear => {
            arity(op, x, &[2, 3])?;
            let (xs, ws) = (x[0].shape(), x[1].shape());
            if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
                return Err(Error::shape(name, xs, ws));
            }
            let (din, dout) = (ws[0], ws[1]);
            if x.len() == 3 && x[2].shape() != [dout] {
                return Err(Error::shape(name, ws, x[2].shape()));
            }
            let m = x[0].len() / din;
            let mut out = Vec::with_capacity(m * dout);
            if x.len() == 3 {
                for _ in 0..m {
                    out.extend_from_slice(x[2].data());
                }
            } else {
                out.resize(m * dout, 0.0);
            }
            k::matmul_acc(x[0].data(), x[1].data(), &mut out, m, din, dout);
            let mut shape = xs[..xs.len() - 1].to_vec();
            shape.push(dout);
            plain(Tensor::from_parts(shape, out))
        }
        Op::Mean { axis } | Op::Sum { axis } => {
            arity(op, x, &[1])?;
            let is_mean = matches!(op, Op::Mean { .. });
            match axis {
                None => {
                    let s: f64 = x[0].data().iter().sum();
                    let v = if is_mean { s / x[0].len() as f64 } else { s };
                    plain(Tensor::scalar(v))
                }
                Some(a) => {
                    check_axis(name, x[0].shape(), *a)?;
                    let mut data = k::sum_axis(x[0].data(), x[0].shape(), *a);
                    if is_mean {
                        let n = x[0].shape()[*a] as f64;
                        data.iter_mut().for_each(|v| *v /= n);
                    }
                    let mut shape = x[0].shape().to_vec();
                    shape.remove(*a);
                    plain(Tensor::from_parts(shape, data))
                }
            }
        }
        Op::TransposeConv3d { stride, grid } => {
            arity(op, x, &[3])?;
            let s = *stride;
            let (xs, ws, bs) = (x[0].shape(), x[1].shape(), x[2].shape());
            let voxels: usize = grid.iter().product();
            if s == 0 || xs.len() != 2 || xs[0] != voxels || voxels == 0 {
                return Err(Error::operand(
                    name,
                    format!("input {xs:?} does not match grid {grid:?} with stride {s}"),
                ));
            }
            let cin = xs[1];
            let s3 = s * s * s;
            if ws.len() != 2 || ws[0] != cin || ws[1] % s3 != 0 {
                return Err(Error::shape(name, xs, ws));
            }
            let cout = ws[1] / s3;
            if bs != [cout] {
                return Err(Error::shape(name, ws, bs));
            }
            let y = k::matmul(x[0].data(), x[1].data(), voxels, cin, s3 * cout);
            let out = shuffle_up(&y, *grid, s, cout, x[2].data());
            plain(Tensor::from_parts(vec![voxels * s3, cout], out))
        }
        Op::EmbeddingAdd(indices) => {
            arity(op, x, &[2])?;
            let (xs, ts) = (x[0].shape(), x[1].shape());
            if xs.len() != 2 || ts.len() != 2 || xs[1] != ts[1] || xs[0] != indices.len() {
                return Err(Error::shape(name, xs, ts));
            }
            let d = xs[1];
            let mut out = x[0].data().to_vec();
            for (r, &i) in indices.iter().enumerate() {
                if i >= ts[0] {
                    return Err(Error::operand(
                        name,
                        format!("index {i} out of range {}", ts[0]),
                    ));
                }
                for j in 0..d {
                    out[r * d + j] += x[1].data()[i * d + j];
                }
            }
            plain(Tensor::from_parts(xs.to_vec(), out))
        }
    }
}

/// Rearranges per-voxel kernel outputs `[V, s^3*C]` into the upsampled grid `[V*s^3, C]`.
fn shuffle_up(y: &[f64], grid: [usize; 3], s: usize, c: usize, bias: &[f64]) -> Vec<f64> {
    let [d, h, w] = grid;
    let (oh, ow) = (h * s, w * s);
    let s3 = s * s * s;
    let mut out = vec![0.0; y.len()];
    for z in 0..d {
        for yy in 0..h {
            for xx in 0..w {
                let v = (z * h + yy) * w + xx;
                for kd in 0..s {
                    for kh in 0..s {
                        for kw in 0..s {
                            let koff = (kd * s + kh) * s + kw;
                            let o = ((z * s + kd) * oh + yy * s + kh) * ow + xx * s + kw;
                            let src = &y[v * s3 * c + koff * c..v * s3 * c + (koff + 1) * c];
                            let dst = &mut out[o * c..(o + 1) * c];
                            for ((dv, sv), bv) in dst.iter_mut().zip(src).zip(bias) {
                                *dv = sv + bv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse layout of [`shuffle_up`] (without bias).
fn shuffle_down(g: &[f64], grid: [usize; 3], s: usize, c: usize) -> Vec<f64> {
    let [d, h, w] = grid;
    let (oh, ow) = (h * s, w * s);
    let s3 = s * s * s;
    let mut out = vec![0.0; g.len()];
    for z in 0..d {
        for yy in 0..h {
            for xx in 0..w {
                let v = (z * h + yy) * w + xx;
                for kd in 0..s {
                    for kh in 0..s {
                        for kw in 0..s {
                            let koff = (kd * s + kh) * s + kw;
                            let o = ((z * s + kd) * oh + yy * s + kh) * ow + xx * s + kw;
                            out[v * s3 * c + koff * c..v * s3 * c + (koff + 1) * c]
                                .copy_from_slice(&g[o * c..(o + 1) * c]);
                        }
                    }
                }
            }
        }
    }
    out
}

fn sum_rows(g: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for row in g.chunks_exact(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn vjp(op: &Op, inputs: &[&Node], out: &Node, g: &[f64], want: &[bool]) -> Vec<Option<Vec<f64>>> {
    let x: Vec<&Tensor> = inputs.iter().map(|n| &n.value).collect();
    let y = &out.value;
    match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (x[0], x[1]);
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            let (ad, bd) = (a.data(), b.data());
            k::for_each_broadcast(a.shape(), b.shape(), y.shape(), |o, ia, ib| {
                let go = g[o];
                match op {
                    Op::Add => {
                        ga[ia] += go;
                        gb[ib] += go;
                    }
                    Op::Sub => {
                        ga[ia] += go;
                        gb[ib] -= go;
                    }
                    Op::Mul => {
                        ga[ia] += go * bd[ib];
                        gb[ib] += go * ad[ia];
                    }
                    _ => {
                        ga[ia] += go / bd[ib];
                        gb[ib] -= go * ad[ia] / (bd[ib] * bd[ib]);
                    }
                }
            });
            vec![Some(ga), Some(gb)]
        }
        Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Op::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (sa, sb) = (a.shape(), b.shape());
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            if sb.len() == 2 && sa[sa.len() - 1] == sb[0] {
                let (kk, n) = (sb[0], sb[1]);
                let m = a.len() / kk;
                if want[0] {
                    k::matmul_nt_acc(g, b.data(), &mut ga, m, n, kk);
                }
                if want[1] {
                    k::matmul_tn_acc(a.data(), g, &mut gb, kk, m, n);
                }
            } else {
                let (bt, m, kk, n) = (sa[0], sa[1], sa[2], sb[2]);
                for i in 0..bt {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    if want[0] {
                        k::matmul_nt_acc(
                            gi,
                            &b.data()[i * kk * n..(i + 1) * kk * n],
                            &mut ga[i * m * kk..(i + 1) * m * kk],
                            m,
                            n,
                            kk,
                        );
                    }
                    if want[1] {
                        k::matmul_tn_acc(
                            &a.data()[i * m * kk..(i + 1) * m * kk],
                            gi,
                            &mut gb[i * kk * n..(i + 1) * kk * n],
                            kk,
                            m,
                            n,
                        );
                    }
                }
            }
            vec![Some(ga), Some(gb)]
        }
        Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::Permute(axes) => {
            let (_, back) = k::permute(g, y.shape(), &k::inverse_axes(axes));
            vec![Some(back)]
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = k::axis_split(y.shape(), *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(x.len());
            for t in &x {
                let n = t.shape()[*axis];
                let mut part = Vec::with_capacity(t.len());
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    part.extend_from_slice(&g[base..base + n * inner]);
                }
                offset += n;
                res.push(Some(part));
            }
            res
        }
        Op::Slice { axis, start, end } => {
            let (outer, n, inner) = k::axis_split(x[0].shape(), *axis);
            let w = end - start;
            let mut gx = vec![0.0; x[0].len()];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + end) * inner]
                    .copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
            }
            vec![Some(gx)]
        }
        Op::GatherRows(rows) => {
            let w = x[0].row_width();
            let mut gx = vec![0.0; x[0].len()];
            for (r, &i) in rows.iter().enumerate() {
                for j in 0..w {
                    gx[i * w + j] += g[r * w + j];
                }
            }
            vec![Some(gx)]
        }
        Op::ScatterRows { indices, .. } => {
            let w = x[0].row_width();
            let mut gx = Vec::with_capacity(x[0].len());
            for &i in indices {
                gx.extend_from_slice(&g[i * w..(i + 1) * w]);
            }
            vec![Some(gx)]
        }
        Op::Softmax { axis } => {
            let (outer, n, inner) = k::axis_split(y.shape(), *axis);
            let yd = y.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mut dotv = 0.0;
                    for j in 0..n {
                        dotv += g[at(j)] * yd[at(j)];
                    }
                    for j in 0..n {
                        gx[at(j)] = yd[at(j)] * (g[at(j)] - dotv);
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::LogSoftmax { axis } => {
            let (outer, n, inner) = k::axis_split(y.shape(), *axis);
            let yd = y.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mut gs = 0.0;
                    for j in 0..n {
                        gs += g[at(j)];
                    }
                    for j in 0..n {
                        gx[at(j)] = g[at(j)] - yd[at(j)].exp() * gs;
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::LayerNorm { .. } => {
            let Saved::LayerNorm { xhat, rstd } = &out.saved else {
                unreachable!("layernorm node without saved statistics")
            };
            let s = x[0].shape();
            let d = s[s.len() - 1];
            let rows = x[0].len() / d;
            let affine = x.len() == 3;
            let mut gx = vec![0.0; x[0].len()];
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            let mut dxhat = vec![0.0; d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let xr = &xhat[r * d..(r + 1) * d];
                for j in 0..d {
                    dxhat[j] = if affine {
                        gr[j] * x[1].data()[j]
                    } else {
                        gr[j]
                    };
                    if affine {
                        ggamma[j] += gr[j] * xr[j];
                        gbeta[j] += gr[j];
                    }
                }
                let m1 = dxhat.iter().sum::<f64>() / d as f64;
                let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    gx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                }
            }
            if affine {
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            } else {
                vec![Some(gx)]
            }
        }
        Op::Gelu => vec![Some(
            x[0].data()
                .iter()
                .zip(g)
                .map(|(&v, gv)| gv * k::gelu_grad(v))
                .collect(),
        )],
        Op::Abs => vec![Some(
            x[0].data()
                .iter()
                .zip(g)
                .map(|(&v, gv)| {
                    if v > 0.0 {
                        *gv
                    } else if v < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })
                .collect(),
        )],
        Op::Sqrt => vec![Some(
            y.data()
                .iter()
                .zip(g)
                .map(|(&r, gv)| 0.5 * gv / r)
                .collect(),
        )],
        Op::Linear => {
            let ws = x[1].shape();
            let (din, dout) = (ws[0], ws[1]);
            let m = x[0].len() / din;
            let mut gx = vec![0.0; x[0].len()];
            let mut gw = vec![0.0; x[1].len()];
            if want[0] {
                k::matmul_nt_acc(g, x[1].data(), &mut gx, m, dout, din);
            }
            if want[1] {
                k::matmul_tn_acc(x[0].data(), g, &mut gw, din, m, dout);
            }
            let mut res = vec![Some(gx), Some(gw)];
            if x.len() == 3 {
                res.push(Some(sum_rows(g, dout)));
            }
            res
        }
        Op::Mean { axis } | Op::Sum { axis } => {
            let is_mean = matches!(op, Op::Mean { .. });
            match axis {
                None => {
                    let v = if is_mean {
                        g[0] / x[0].len() as f64
                    } else {
                        g[0]
                    };
                    vec![Some(vec![v; x[0].len()])]
                }
                Some(a) => {
                    let (outer, n, inner) = k::axis_split(x[0].shape(), *a);
                    let scale = if is_mean { 1.0 / n as f64 } else { 1.0 };
                    let mut gx = vec![0.0; x[0].len()];
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                gx[(o * n + j) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    vec![Some(gx)]
                }
            }
        }
        Op::TransposeConv3d { stride, grid } => {
            let s = *stride;
            let s3 = s * s * s;
            let cin = x[0].shape()[1];
            let cout = x[2].len();
            let voxels: usize = grid.iter().product();
            let gy = shuffle_down(g, *grid, s, cout);
            let mut gx = vec![0.0; x[0].len()];
            let mut gw = vec![0.0; x[1].len()];
            if want[0] {
                k::matmul_nt_acc(&gy, x[1].data(), &mut gx, voxels, s3 * cout, cin);
            }
            if want[1] {
                k::matmul_tn_acc(x[0].data(), &gy, &mut gw, cin, voxels, s3 * cout);
            }
            vec![Some(gx), Some(gw), Some(sum_rows(g, cout))]
        }
        Op::EmbeddingAdd(indices) => {
            let d = x[0].shape()[1];
            let mut gt = vec![0.0; x[1].len()];
            if want[1] {
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
            }
            vec![Some(g.to_vec()), Some(gt)]
        }
    }
}
