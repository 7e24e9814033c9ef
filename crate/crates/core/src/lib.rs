//! Masked image modeling for 3D volumes on a small f64 autodiff engine.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod infer;
pub mod models;
pub mod objectives;
pub mod patch;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Gradients, Graph, Tensor, Var};
