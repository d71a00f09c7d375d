//! Synthetic inputs shared by the benchmarks.

use lines_core::{NamedTensorMap, TaskVector, Tensor};

/// `blocks` layers of `width * width` weights plus a bias each, with values
/// from a fixed integer hash so every run sees the same data.
pub fn synthetic(blocks: usize, width: usize, salt: u64) -> NamedTensorMap {
    let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 40) as f32 / (1u64 << 24) as f32 - 0.5
    };
    let mut m = NamedTensorMap::new();
    for d in 0..blocks {
        let w: Vec<f32> = (0..width * width).map(|_| next()).collect();
        m.insert(format!("blocks.layer{d}.weight"), Tensor::new(vec![width, width], w).unwrap());
        m.insert(format!("blocks.layer{d}.bias"), Tensor::vector((0..width).map(|_| next()).collect()));
    }
    m.insert("head.weight", Tensor::vector((0..width).map(|_| next()).collect()));
    m
}

pub fn task_vectors(n: usize, blocks: usize, width: usize) -> Vec<TaskVector> {
    (0..n)
        .map(|i| TaskVector::new(synthetic(blocks, width, i as u64 + 1)).unwrap())
        .collect()
}
