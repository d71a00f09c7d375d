//! A small residual MLP trained with plain minibatch SGD.
//!
//! `h0 = E x + e`, then per block `h <- h + relu(W h + b)`, then per task head
//! `logits = H h + c`. Parameters are named `embed.*`, `blocks.layer{d}.*`
//! and `head.{t}.*`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::data::{mix_seed, Dataset, SplitData};
use crate::error::{Error, Result};
use crate::search::Split;
use crate::tensor_store::{NamedTensorMap, Tensor};
use crate::topology::TopologyConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyMlpSpec {
    pub num_blocks: usize,
    pub width: usize,
    pub in_dim: usize,
    pub num_classes: usize,
    pub num_heads: usize,
    /// Block weights start at `block_init / sqrt(width)` standard deviation.
    /// Only used for fresh weights.
    pub block_init: f32,
}

impl Default for ToyMlpSpec {
    fn default() -> Self {
        ToyMlpSpec {
            num_blocks: 6,
            width: 32,
            in_dim: 16,
            num_classes: 4,
            num_heads: 1,
            block_init: 0.5,
        }
    }
}

impl ToyMlpSpec {
    pub fn topology(&self) -> TopologyConfig {
        TopologyConfig::new(".layer{d}.", self.num_blocks)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 2 || self.width == 0 || self.in_dim == 0 || self.num_classes == 0 || self.num_heads == 0 {
            return Err(Error::InvalidConfig(format!("invalid toy model spec {self:?}")));
        }
        Ok(())
    }
}

pub fn block_key(d: usize, part: &str) -> String {
    format!("blocks.layer{d}.{part}")
}

pub fn head_key(h: usize, part: &str) -> String {
    format!("head.{h}.{part}")
}

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    /// Row-major `out x inp`.
    w: Vec<f32>,
    b: Vec<f32>,
    inp: usize,
    out: usize,
}

impl Linear {
    fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            w: vec![0.0; inp * out],
            b: vec![0.0; out],
            inp,
            out,
        }
    }

    fn random(inp: usize, out: usize, std: f32, rng: &mut ChaCha8Rng) -> Self {
        let mut l = Self::zeros(inp, out);
        for w in &mut l.w {
            *w = std * rng.sample::<f32, _>(StandardNormal);
        }
        l
    }

    fn forward(&self, x: &[f32], y: &mut [f32]) {
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w[o * self.inp..(o + 1) * self.inp];
            *yo = self.b[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>();
        }
    }

    /// Accumulate `dW += g x^T`, `db += g`; add `W^T g` into `dx` if given.
    fn backward(&self, x: &[f32], g: &[f32], grad: &mut Linear, dx: Option<&mut [f32]>) {
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            grad.b[o] += go;
            let grow = &mut grad.w[o * self.inp..(o + 1) * self.inp];
            for (gw, &v) in grow.iter_mut().zip(x) {
                *gw += go * v;
            }
        }
        if let Some(dx) = dx {
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let row = &self.w[o * self.inp..(o + 1) * self.inp];
                for (d, &w) in dx.iter_mut().zip(row) {
                    *d += go * w;
                }
            }
        }
    }

    fn sgd_step(&mut self, grad: &Linear, scale: f32) {
        for (w, g) in self.w.iter_mut().zip(&grad.w) {
            *w -= scale * g;
        }
        for (b, g) in self.b.iter_mut().zip(&grad.b) {
            *b -= scale * g;
        }
    }

    fn clear(&mut self) {
        self.w.iter_mut().for_each(|v| *v = 0.0);
        self.b.iter_mut().for_each(|v| *v = 0.0);
    }

    fn write(&self, map: &mut NamedTensorMap, w_key: String, b_key: String) {
        map.insert(w_key, Tensor::new(vec![self.out, self.inp], self.w.clone()).unwrap());
        map.insert(b_key, Tensor::new(vec![self.out], self.b.clone()).unwrap());
    }

    fn read(map: &NamedTensorMap, w_key: &str, b_key: &str, inp: usize, out: usize) -> Result<Self> {
        let fetch = |key: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let t = map
                .get(key)
                .ok_or_else(|| Error::Shape(format!("missing toy parameter {key:?}")))?;
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "toy parameter {key:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.data().to_vec())
        };
        Ok(Linear {
            w: fetch(w_key, &[out, inp])?,
            b: fetch(b_key, &[out])?,
            inp,
            out,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyMlp {
    spec: ToyMlpSpec,
    embed: Linear,
    blocks: Vec<Linear>,
    heads: Vec<Linear>,
}

/// Activations kept for the backward pass.
struct Trace {
    hidden: Vec<Vec<f32>>,
    pre: Vec<Vec<f32>>,
    logits: Vec<f32>,
}

impl ToyMlp {
    pub fn random(spec: ToyMlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1717));
        let embed = Linear::random(spec.in_dim, spec.width, (1.0 / spec.in_dim as f32).sqrt(), &mut rng);
        let block_std = spec.block_init / (spec.width as f32).sqrt();
        let blocks = (0..spec.num_blocks)
            .map(|_| Linear::random(spec.width, spec.width, block_std, &mut rng))
            .collect();
        let head_std = (1.0 / spec.width as f32).sqrt();
        let heads = (0..spec.num_heads)
            .map(|_| Linear::random(spec.width, spec.num_classes, head_std, &mut rng))
            .collect();
        Ok(ToyMlp {
            spec,
            embed,
            blocks,
            heads,
        })
    }

    pub fn spec(&self) -> ToyMlpSpec {
        self.spec
    }

    /// Rebuild from a checkpoint, inferring the architecture from its shapes.
    pub fn from_map(map: &NamedTensorMap) -> Result<Self> {
        let embed_w = map
            .get("embed.weight")
            .ok_or_else(|| Error::Shape("missing toy parameter \"embed.weight\"".into()))?;
        let [width, in_dim] = embed_w.shape() else {
            return Err(Error::Shape(format!("embed.weight has shape {:?}", embed_w.shape())));
        };
        let (width, in_dim) = (*width, *in_dim);
        let num_blocks = (0..).take_while(|d| map.contains(&block_key(*d, "weight"))).count();
        let num_heads = (0..).take_while(|h| map.contains(&head_key(*h, "weight"))).count();
        let num_classes = match num_heads {
            0 => return Err(Error::Shape("toy model has no head".into())),
            _ => map.get(&head_key(0, "weight")).unwrap().shape()[0],
        };
        let spec = ToyMlpSpec {
            num_blocks,
            width,
            in_dim,
            num_classes,
            num_heads,
            ..Default::default()
        };
        spec.validate()?;
        let expected_keys = 2 + 2 * num_blocks + 2 * num_heads;
        if map.len() != expected_keys {
            return Err(Error::Shape(format!(
                "toy model should have {expected_keys} tensors, found {}",
                map.len()
            )));
        }
        let embed = Linear::read(map, "embed.weight", "embed.bias", in_dim, width)?;
        let blocks = (0..num_blocks)
            .map(|d| Linear::read(map, &block_key(d, "weight"), &block_key(d, "bias"), width, width))
            .collect::<Result<_>>()?;
        let heads = (0..num_heads)
            .map(|h| Linear::read(map, &head_key(h, "weight"), &head_key(h, "bias"), width, num_classes))
            .collect::<Result<_>>()?;
        Ok(ToyMlp {
            spec,
            embed,
            blocks,
            heads,
        })
    }

    pub fn to_map(&self) -> NamedTensorMap {
        let mut map = NamedTensorMap::new();
        self.embed.write(&mut map, "embed.weight".into(), "embed.bias".into());
        for (d, b) in self.blocks.iter().enumerate() {
            b.write(&mut map, block_key(d, "weight"), block_key(d, "bias"));
        }
        for (h, l) in self.heads.iter().enumerate() {
            l.write(&mut map, head_key(h, "weight"), head_key(h, "bias"));
        }
        map
    }

    fn forward(&self, x: &[f32], head: usize) -> Trace {
        let w = self.spec.width;
        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        let mut pre = Vec::with_capacity(self.blocks.len());
        let mut h = vec![0.0; w];
        self.embed.forward(x, &mut h);
        hidden.push(h);
        for block in &self.blocks {
            let cur = hidden.last().unwrap();
            let mut z = vec![0.0; w];
            block.forward(cur, &mut z);
            let next = cur.iter().zip(&z).map(|(h, z)| h + z.max(0.0)).collect();
            pre.push(z);
            hidden.push(next);
        }
        let mut logits = vec![0.0; self.spec.num_classes];
        self.heads[head].forward(hidden.last().unwrap(), &mut logits);
        Trace {
            hidden,
            pre,
            logits,
        }
    }

    pub fn logits(&self, x: &[f32], head: usize) -> Vec<f32> {
        self.forward(x, head).logits
    }

    /// Argmax class; ties go to the lowest index.
    pub fn predict(&self, x: &[f32], head: usize) -> usize {
        argmax(&self.logits(x, head))
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let s = &data.spec;
        if s.in_dim != self.spec.in_dim || s.num_classes != self.spec.num_classes || s.head >= self.spec.num_heads {
            return Err(Error::Shape(format!(
                "task (in_dim {}, classes {}, head {}) does not fit model (in_dim {}, classes {}, heads {})",
                s.in_dim, s.num_classes, s.head, self.spec.in_dim, self.spec.num_classes, self.spec.num_heads
            )));
        }
        Ok(())
    }

    pub fn accuracy(&self, split: &SplitData, head: usize) -> f64 {
        if split.is_empty() {
            return 0.0;
        }
        let correct = (0..split.len())
            .filter(|&i| self.predict(split.row(i), head) == split.y[i])
            .count();
        correct as f64 / split.len() as f64
    }

    /// Backprop one sample's cross-entropy loss into `grad`; returns the loss.
    fn accumulate(&self, x: &[f32], y: usize, head: usize, grad: &mut ToyMlp, cfg: &TrainConfig) -> f32 {
        let t = self.forward(x, head);
        let probs = softmax(&t.logits);
        let loss = -probs[y].max(1e-12).ln();
        let mut g_logits = probs;
        g_logits[y] -= 1.0;

        let w = self.spec.width;
        let top = t.hidden.last().unwrap();
        let mut g_h = vec![0.0; w];
        let head_grad = &mut grad.heads[head];
        self.heads[head].backward(top, &g_logits, head_grad, Some(&mut g_h));
        if !cfg.train_trunk {
            return loss;
        }
        for d in (0..self.blocks.len()).rev() {
            let g_z: Vec<f32> = g_h
                .iter()
                .zip(&t.pre[d])
                .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
                .collect();
            // g_h already carries the identity path; add the block's contribution.
            self.blocks[d].backward(&t.hidden[d], &g_z, &mut grad.blocks[d], Some(&mut g_h));
        }
        self.embed.backward(x, &g_h, &mut grad.embed, None);
        loss
    }

    fn zero_like(&self) -> ToyMlp {
        ToyMlp {
            spec: self.spec,
            embed: Linear::zeros(self.embed.inp, self.embed.out),
            blocks: self.blocks.iter().map(|b| Linear::zeros(b.inp, b.out)).collect(),
            heads: self.heads.iter().map(|h| Linear::zeros(h.inp, h.out)).collect(),
        }
    }

    fn clear(&mut self) {
        self.embed.clear();
        self.blocks.iter_mut().for_each(Linear::clear);
        self.heads.iter_mut().for_each(Linear::clear);
    }

    fn step(&mut self, grad: &ToyMlp, scale: f32, cfg: &TrainConfig) {
        if cfg.train_trunk {
            self.embed.sgd_step(&grad.embed, scale);
            for (b, g) in self.blocks.iter_mut().zip(&grad.blocks) {
                b.sgd_step(g, scale);
            }
        }
        if cfg.train_heads {
            for (h, g) in self.heads.iter_mut().zip(&grad.heads) {
                h.sgd_step(g, scale);
            }
        }
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub train_trunk: bool,
    pub train_heads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
            train_trunk: true,
            train_heads: true,
        }
    }
}

/// Starting point for training.
#[derive(Clone, Debug)]
pub enum Init {
    Model(NamedTensorMap),
    /// Fresh weights for the given architecture and seed.
    Random(ToyMlpSpec, u64),
}

impl Init {
    /// Parse `random:<seed>`; anything else is an error.
    pub fn parse_random(s: &str, spec: ToyMlpSpec) -> Result<Self> {
        s.strip_prefix("random:")
            .and_then(|n| n.parse().ok())
            .map(|seed| Init::Random(spec, seed))
            .ok_or_else(|| Error::InvalidConfig(format!("expected random:<seed>, got {s:?}")))
    }
}

/// Train on the union of the datasets' train splits, each through its own head.
///
/// Batches are drawn in an order fixed by `cfg.seed`, and gradients are summed
/// sample by sample in that order, so identical inputs give identical weights.
pub fn train_model(init: Init, datasets: &[&Dataset], cfg: &TrainConfig) -> Result<NamedTensorMap> {
    let mut model = match &init {
        Init::Model(map) => ToyMlp::from_map(map)?,
        Init::Random(spec, seed) => ToyMlp::random(*spec, *seed)?,
    };
    for d in datasets {
        model.check_dataset(d)?;
    }
    if cfg.epochs == 0 {
        return Ok(match init {
            Init::Model(map) => map,
            Init::Random(..) => model.to_map(),
        });
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }

    let mut samples: Vec<(usize, usize)> = datasets
        .iter()
        .enumerate()
        .flat_map(|(di, d)| (0..d.train.len()).map(move |i| (di, i)))
        .collect();
    let mut grad = model.zero_like();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64 + 1));
        samples.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in samples.chunks(cfg.batch_size) {
            grad.clear();
            for &(di, i) in batch {
                let d = datasets[di];
                epoch_loss += model.accumulate(d.train.row(i), d.train.y[i], d.head(), &mut grad, cfg) as f64;
            }
            model.step(&grad, cfg.learning_rate / batch.len() as f32, cfg);
        }
        log::trace!("epoch {epoch}: mean loss {:.4}", epoch_loss / samples.len() as f64);
    }
    Ok(model.to_map())
}

/// Fraction of correct argmax predictions on one split of `data`.
pub fn evaluate_model(model: &NamedTensorMap, data: &Dataset, split: Split) -> Result<f64> {
    let mlp = ToyMlp::from_map(model)?;
    mlp.check_dataset(data)?;
    Ok(mlp.accuracy(data.split(split), data.head()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::data::{generate_task, SplitSizes, SyntheticTaskSpec};

    fn small_task() -> Dataset {
        generate_task(&SyntheticTaskSpec {
            seed: 3,
            samples_per_split: SplitSizes {
                train: 128,
                val: 64,
                test: 64,
            },
            ..Default::default()
        })
    }

    #[test]
    fn map_round_trip_and_names() {
        let m = ToyMlp::random(ToyMlpSpec::default(), 17).unwrap();
        let map = m.to_map();
        assert_eq!(map.len(), 2 + 12 + 2);
        assert!(map.contains("blocks.layer5.weight"));
        assert!(map.contains("head.0.bias"));
        assert_eq!(ToyMlp::from_map(&map).unwrap(), m);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let init = ToyMlp::random(ToyMlpSpec::default(), 1).unwrap().to_map();
        let data = small_task();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train_model(Init::Model(init.clone()), &[&data], &cfg).unwrap();
        assert!(out.bit_eq(&init));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = small_task();
        let cfg = TrainConfig {
            epochs: 15,
            seed: 9,
            ..Default::default()
        };
        let spec = ToyMlpSpec::default();
        let a = train_model(Init::Random(spec, 4), &[&data], &cfg).unwrap();
        let b = train_model(Init::Random(spec, 4), &[&data], &cfg).unwrap();
        assert!(a.bit_eq(&b));
        let untrained = ToyMlp::random(spec, 4).unwrap().to_map();
        let before = evaluate_model(&untrained, &data, Split::Val).unwrap();
        let after = evaluate_model(&a, &data, Split::Val).unwrap();
        assert!(after > before, "{before} -> {after}");
    }

    #[test]
    fn zeroed_head_predicts_class_zero() {
        let data = small_task();
        let mut map = ToyMlp::random(ToyMlpSpec::default(), 2).unwrap().to_map();
        map.insert("head.0.weight", Tensor::zeros(vec![4, 32]));
        map.insert("head.0.bias", Tensor::zeros(vec![4]));
        let acc = evaluate_model(&map, &data, Split::Test).unwrap();
        let zeros = data.test.y.iter().filter(|&&y| y == 0).count() as f64 / data.test.len() as f64;
        assert_eq!(acc, zeros);
        assert!((acc - 0.25).abs() < 1e-12);
    }

    #[test]
    fn memorizes_tiny_split() {
        let data = generate_task(&SyntheticTaskSpec {
            seed: 11,
            samples_per_split: SplitSizes {
                train: 10,
                val: 10,
                test: 10,
            },
            cluster_spread: 2.0,
            ..Default::default()
        });
        let cfg = TrainConfig {
            epochs: 400,
            batch_size: 10,
            learning_rate: 0.1,
            ..Default::default()
        };
        let model = train_model(Init::Random(ToyMlpSpec::default(), 0), &[&data], &cfg).unwrap();
        let mlp = ToyMlp::from_map(&model).unwrap();
        assert_eq!(mlp.accuracy(&data.train, 0), 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = ToyMlpSpec {
            num_blocks: 2,
            width: 5,
            in_dim: 3,
            num_classes: 3,
            num_heads: 1,
            ..Default::default()
        };
        let model = ToyMlp::random(spec, 8).unwrap();
        let x = [0.3f32, -1.2, 0.7];
        let y = 2;
        let cfg = TrainConfig::default();
        let mut grad = model.zero_like();
        model.accumulate(&x, y, 0, &mut grad, &cfg);
        let grad_map = grad.to_map();

        let loss = |m: &NamedTensorMap| -> f64 {
            let mlp = ToyMlp::from_map(m).unwrap();
            let l: Vec<f64> = mlp.logits(&x, 0).iter().map(|&v| v as f64).collect();
            let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + l.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            lse - l[y]
        };
        let base = model.to_map();
        let eps = 2e-3f32;
        for (key, t) in base.iter() {
            for j in 0..t.numel() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                let mut dp = t.data().to_vec();
                dp[j] += eps;
                plus.insert(key, Tensor::new(t.shape().to_vec(), dp).unwrap());
                let mut dm = t.data().to_vec();
                dm[j] -= eps;
                minus.insert(key, Tensor::new(t.shape().to_vec(), dm).unwrap());
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps as f64);
                let analytic = grad_map.get(key).unwrap().data()[j] as f64;
                assert!(
                    (numeric - analytic).abs() <= 2e-2 * numeric.abs().max(0.05),
                    "{key}[{j}]: numeric {numeric} analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn rejects_wrong_shapes() {
        let data = small_task();
        let spec = ToyMlpSpec {
            in_dim: 8,
            ..Default::default()
        };
        let map = ToyMlp::random(spec, 0).unwrap().to_map();
        assert!(matches!(evaluate_model(&map, &data, Split::Val), Err(Error::Shape(_))));
        let mut broken = ToyMlp::random(ToyMlpSpec::default(), 0).unwrap().to_map();
        broken.insert("blocks.layer1.bias", Tensor::zeros(vec![7]));
        assert!(matches!(ToyMlp::from_map(&broken), Err(Error::Shape(_))));
    }
}
