//! Shared fixtures for the benchmarks.

use volmim_core::volume::{synth_generate, Volume};
use volmim_core::Tensor;

/// Deterministic pseudo-random matrix with entries in [-1, 1).
pub fn matrix(rows: usize, cols: usize, salt: u64) -> Tensor {
    let mut state = salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let data = (0..rows * cols)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

pub fn volume(edge: usize) -> Volume {
    synth_generate(0, 1, [edge; 3], 4)
        .expect("valid synth shape")
        .remove(0)
        .0
}
