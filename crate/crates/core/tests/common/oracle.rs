//! Reference implementations the library is checked against.

use lines_core::search::EvalResult;
use lines_core::{NamedTensorMap, Result, TaskVector, Tensor};
use rand::Rng;

use super::{fill, layout, tv_from};

pub fn ties_oracle(vectors: &[Vec<f32>], keep: f64) -> Vec<f32> {
    let n = vectors[0].len();
    let k = ((keep * n as f64).ceil() as usize).clamp(1, n);
    let trimmed: Vec<Vec<f32>> = vectors
        .iter()
        .map(|v| {
            v.iter()
                .map(|&x| {
                    let larger = v.iter().filter(|y| y.abs() > x.abs()).count();
                    if larger < k {
                        x
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    (0..n)
        .map(|j| {
            let pos: f64 = trimmed.iter().filter(|t| t[j] > 0.0).map(|t| t[j] as f64).sum();
            let neg: f64 = trimmed.iter().filter(|t| t[j] < 0.0).map(|t| -(t[j] as f64)).sum();
            let positive = pos >= neg;
            let agree: Vec<f64> = trimmed
                .iter()
                .map(|t| t[j])
                .filter(|&x| x != 0.0 && (x > 0.0) == positive)
                .map(f64::from)
                .collect();
            if agree.is_empty() {
                0.0
            } else {
                (agree.iter().sum::<f64>() / agree.len() as f64) as f32
            }
        })
        .collect()
}

pub fn consensus_oracle(vectors: &[Vec<f32>], mask_lambda: f64, threshold: usize) -> Vec<f32> {
    (0..vectors[0].len())
        .map(|j| {
            let total: f64 = vectors.iter().map(|v| v[j] as f64).sum();
            let mut relevant = 0;
            for v in vectors {
                let own = v[j] as f64;
                if own.abs() >= mask_lambda * (total - own).abs() {
                    relevant += 1;
                }
            }
            if relevant >= threshold {
                total as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// Values mixing a small integer grid (to force magnitude and sign ties) with
/// continuous draws and zeros.
pub fn draw(rng: &mut impl Rng) -> f32 {
    match rng.gen_range(0..4) {
        0 => rng.gen_range(-3i32..=3) as f32,
        1 => 0.0,
        _ => rng.gen_range(-2.0f32..2.0),
    }
}

pub fn random_instance(rng: &mut impl Rng, max_vectors: usize) -> Vec<TaskVector> {
    let n = rng.gen_range(1..=64);
    let lay = layout(rng, n, 3);
    let count = rng.gen_range(2..=max_vectors);
    (0..count).map(|_| tv_from(fill(&lay, || draw(rng)))).collect()
}

/// Members are one-hot; any average of a subset is decoded back to its
/// member set and scored from a random table.
pub struct SubsetTable {
    pub n: usize,
    pub metrics: Vec<f64>,
}

impl lines_core::Evaluator for SubsetTable {
    fn evaluate(&self, model: &NamedTensorMap) -> Result<EvalResult> {
        let w = model.get("w").unwrap().data();
        let mask = (0..self.n).filter(|&i| w[i] != 0.0).fold(0usize, |m, i| m | 1 << i);
        Ok(EvalResult::new(self.metrics[mask]))
    }
}

pub fn one_hot(n: usize, i: usize) -> NamedTensorMap {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    NamedTensorMap::new().with("w", Tensor::vector(v))
}

