use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Operation name without attributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    MatMul,
    Reshape,
    Permute,
    Concat,
    Slice,
    GatherRows,
    ScatterRows,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Gelu,
    Abs,
    Sqrt,
    Linear,
    Mean,
    Sum,
    TransposeConv3d,
    EmbeddingAdd,
}

const KIND_NAMES: &[(OpKind, &str)] = &[
    (OpKind::Add, "add"),
    (OpKind::Sub, "sub"),
    (OpKind::Mul, "mul"),
    (OpKind::Div, "div"),
    (OpKind::Scale, "scale"),
    (OpKind::MatMul, "matmul"),
    (OpKind::Reshape, "reshape"),
    (OpKind::Permute, "permute"),
    (OpKind::Concat, "concat"),
    (OpKind::Slice, "slice"),
    (OpKind::GatherRows, "gather-rows"),
    (OpKind::ScatterRows, "scatter-rows"),
    (OpKind::Softmax, "softmax"),
    (OpKind::LogSoftmax, "log-softmax"),
    (OpKind::LayerNorm, "layernorm"),
    (OpKind::Gelu, "gelu"),
    (OpKind::Abs, "abs"),
    (OpKind::Sqrt, "sqrt"),
    (OpKind::Linear, "linear"),
    (OpKind::Mean, "mean"),
    (OpKind::Sum, "sum"),
    (OpKind::TransposeConv3d, "transpose-conv3d"),
    (OpKind::EmbeddingAdd, "embedding-add"),
];

impl OpKind {
    pub fn name(self) -> &'static str {
        KIND_NAMES
            .iter()
            .find(|(k, _)| *k == self)
            .map(|(_, n)| *n)
            .unwrap_or("?")
    }

    pub fn all() -> impl Iterator<Item = OpKind> {
        KIND_NAMES.iter().map(|(k, _)| *k)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KIND_NAMES
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(k, _)| *k)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// Loose attribute bag used when an op is built from its name.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub axis: Option<usize>,
    pub shape: Vec<usize>,
    pub axes: Vec<usize>,
    pub indices: Vec<usize>,
    pub start: usize,
    pub end: usize,
    pub rows: usize,
    pub factor: f64,
    pub eps: f64,
    pub stride: usize,
    pub grid: [usize; 3],
}

/// A fully specified operation.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    /// `[.., m, k] x [k, n]` or batched `[b, m, k] x [b, k, n]`.
    MatMul,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    GatherRows(Vec<usize>),
    /// Places input rows at `indices` of a zero tensor with `rows` leading entries.
    ScatterRows {
        indices: Vec<usize>,
        rows: usize,
    },
    Softmax {
        axis: usize,
    },
    LogSoftmax {
        axis: usize,
    },
    /// Normalizes over the last axis; optional gamma/beta operands.
    LayerNorm {
        eps: f64,
    },
    Gelu,
    Abs,
    Sqrt,
    /// `x W (+ b)`, with `W` stored as `[in, out]`.
    Linear,
    Mean {
        axis: Option<usize>,
    },
    Sum {
        axis: Option<usize>,
    },
    /// Channels-last `[D*H*W, Cin]` to `[(sD)(sH)(sW), Cout]` with kernel == stride.
    /// Weight is `[Cin, s^3 * Cout]` (kernel offset major), bias `[Cout]`.
    TransposeConv3d {
        stride: usize,
        grid: [usize; 3],
    },
    /// `x[i] + table[indices[i]]`.
    EmbeddingAdd(Vec<usize>),
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::Scale(_) => OpKind::Scale,
            Op::MatMul => OpKind::MatMul,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute(_) => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::GatherRows(_) => OpKind::GatherRows,
            Op::ScatterRows { .. } => OpKind::ScatterRows,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu => OpKind::Gelu,
            Op::Abs => OpKind::Abs,
            Op::Sqrt => OpKind::Sqrt,
            Op::Linear => OpKind::Linear,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
            Op::TransposeConv3d { .. } => OpKind::TransposeConv3d,
            Op::EmbeddingAdd(_) => OpKind::EmbeddingAdd,
        }
    }

    /// Builds an op from its textual kind and attributes.
    pub fn from_name(name: &str, attrs: &OpAttrs) -> Result<Op> {
        let kind: OpKind = name.parse()?;
        Ok(match kind {
            OpKind::Add => Op::Add,
            OpKind::Sub => Op::Sub,
            OpKind::Mul => Op::Mul,
            OpKind::Div => Op::Div,
            OpKind::Scale => Op::Scale(attrs.factor),
            OpKind::MatMul => Op::MatMul,
            OpKind::Reshape => Op::Reshape(attrs.shape.clone()),
            OpKind::Permute => Op::Permute(attrs.axes.clone()),
            OpKind::Concat => Op::Concat {
                axis: attrs.axis.unwrap_or(0),
            },
            OpKind::Slice => Op::Slice {
                axis: attrs.axis.unwrap_or(0),
                start: attrs.start,
                end: attrs.end,
            },
            OpKind::GatherRows => Op::GatherRows(attrs.indices.clone()),
            OpKind::ScatterRows => Op::ScatterRows {
                indices: attrs.indices.clone(),
                rows: attrs.rows,
            },
            OpKind::Softmax => Op::Softmax {
                axis: attrs.axis.unwrap_or(0),
            },
            OpKind::LogSoftmax => Op::LogSoftmax {
                axis: attrs.axis.unwrap_or(0),
            },
            OpKind::LayerNorm => Op::LayerNorm {
                eps: if attrs.eps > 0.0 {
                    attrs.eps
                } else {
                    crate::tensor::graph::LAYERNORM_EPS
                },
            },
            OpKind::Gelu => Op::Gelu,
            OpKind::Abs => Op::Abs,
            OpKind::Sqrt => Op::Sqrt,
            OpKind::Linear => Op::Linear,
            OpKind::Mean => Op::Mean { axis: attrs.axis },
            OpKind::Sum => Op::Sum { axis: attrs.axis },
            OpKind::TransposeConv3d => Op::TransposeConv3d {
                stride: attrs.stride,
                grid: attrs.grid,
            },
            OpKind::EmbeddingAdd => Op::EmbeddingAdd(attrs.indices.clone()),
        })
    }
}
