#![allow(dead_code)]

pub mod oracle;

use lines_core::{NamedTensorMap, TaskVector, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tensor layout: up to `max_tensors` keys, `total` elements overall.
pub fn layout(rng: &mut impl Rng, total: usize, max_tensors: usize) -> Vec<(String, usize)> {
    let n = rng.gen_range(1..=max_tensors.min(total));
    let mut cuts: Vec<usize> = (0..n - 1).map(|_| rng.gen_range(1..total)).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut out = Vec::new();
    let mut prev = 0;
    for (i, c) in cuts.into_iter().chain([total]).enumerate() {
        out.push((format!("t{i}"), c - prev));
        prev = c;
    }
    out
}

pub fn fill(layout: &[(String, usize)], mut value: impl FnMut() -> f32) -> NamedTensorMap {
    let mut m = NamedTensorMap::new();
    for (name, len) in layout {
        m.insert(name.clone(), Tensor::vector((0..*len).map(|_| value()).collect()));
    }
    m
}

pub fn tv_from(map: NamedTensorMap) -> TaskVector {
    TaskVector::new(map).unwrap()
}

/// Concatenation of all entries in sorted key order.
pub fn flat(map: &NamedTensorMap) -> Vec<f32> {
    map.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

pub fn flat_tv(tv: &TaskVector) -> Vec<f32> {
    flat(tv.entries())
}

pub fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Toy-style keys: embed, `blocks.layer{d}`, head.
pub fn block_map(num_blocks: usize, width: usize, mut value: impl FnMut() -> f32) -> NamedTensorMap {
    let mut m = NamedTensorMap::new();
    let mut push = |m: &mut NamedTensorMap, name: String| {
        m.insert(name, Tensor::vector((0..width).map(|_| value()).collect()));
    };
    push(&mut m, "embed.weight".into());
    for d in 0..num_blocks {
        push(&mut m, format!("blocks.layer{d}.weight"));
        push(&mut m, format!("blocks.layer{d}.bias"));
    }
    push(&mut m, "head.weight".into());
    m
}

pub fn rel_diff(a: &[f32], b: &[f32]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| (*x as f64).powi(2))
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
