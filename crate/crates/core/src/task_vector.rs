//! Residual algebra: extraction, application, linear combination, norms.
//!
//! All reductions accumulate in `f64` and walk keys in sorted order, one
//! tensor at a time, so results do not depend on the thread count.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor_store::{
    self, validate_compatibility, DtypePolicy, LoadOptions, NamedTensorMap, Tensor,
};

pub const KIND_KEY: &str = "lines.kind";
pub const KIND_TASK_VECTOR: &str = "task_vector";
pub const BASE_FINGERPRINT_KEY: &str = "lines.base_fingerprint";

/// The difference between a fine-tuned checkpoint and its base.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    entries: NamedTensorMap,
    base_fingerprint: Option<String>,
}

impl TaskVector {
    /// Wrap raw entries. Non-finite values are rejected.
    pub fn new(entries: NamedTensorMap) -> Result<Self> {
        check_finite(&entries)?;
        let mut entries = entries;
        entries.metadata_mut().clear();
        Ok(TaskVector {
            entries,
            base_fingerprint: None,
        })
    }

    pub fn with_base_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.base_fingerprint = Some(fingerprint.into());
        self
    }

    pub fn entries(&self) -> &NamedTensorMap {
        &self.entries
    }

    pub fn into_entries(self) -> NamedTensorMap {
        self.entries
    }

    pub fn base_fingerprint(&self) -> Option<&str> {
        self.base_fingerprint.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter()
    }

    pub fn numel(&self) -> usize {
        self.entries.numel()
    }

    /// A vector of zeros laid out like `like`.
    pub fn zeros_like(like: &NamedTensorMap) -> Self {
        TaskVector {
            entries: map_tensors(like, |t| t.map(|_| 0.0)),
            base_fingerprint: None,
        }
    }

    /// Apply `f` to every tensor, keeping the fingerprint.
    pub fn map_tensors(&self, f: impl Fn(&str, &Tensor) -> Tensor + Sync) -> Self {
        let tensors: BTreeMap<String, Tensor> = self
            .entries
            .tensors()
            .par_iter()
            .map(|(k, t)| (k.clone(), f(k, t)))
            .collect();
        TaskVector {
            entries: NamedTensorMap::from_tensors(tensors),
            base_fingerprint: self.base_fingerprint.clone(),
        }
    }

    pub fn scaled(&self, coeff: f64) -> Self {
        self.map_tensors(|_, t| t.map(|v| (v as f64 * coeff) as f32))
    }

    /// Checkpoint form, tagged as a residual in the metadata block.
    pub fn to_checkpoint(&self) -> NamedTensorMap {
        let mut map = self.entries.clone();
        map.metadata_mut()
            .insert(KIND_KEY.into(), KIND_TASK_VECTOR.into());
        if let Some(fp) = &self.base_fingerprint {
            map.metadata_mut()
                .insert(BASE_FINGERPRINT_KEY.into(), fp.clone());
        }
        map
    }

    /// Read back from a checkpoint. Untagged checkpoints are accepted as raw residuals.
    pub fn from_checkpoint(map: NamedTensorMap) -> Result<Self> {
        let fp = map.metadata().get(BASE_FINGERPRINT_KEY).cloned();
        let mut tv = TaskVector::new(map)?;
        tv.base_fingerprint = fp;
        Ok(tv)
    }

    pub fn save(&self, path: impl AsRef<Path>, policy: DtypePolicy) -> Result<()> {
        tensor_store::write_checkpoint(&self.to_checkpoint(), path, policy).map(|_| ())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(tensor_store::read_checkpoint(path, LoadOptions::default())?)
    }
}

fn check_finite(map: &NamedTensorMap) -> Result<()> {
    for (name, t) in map.iter() {
        if let Some(index) = t.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: name.to_string(),
                index,
            });
        }
    }
    Ok(())
}

fn map_tensors(map: &NamedTensorMap, f: impl Fn(&Tensor) -> Tensor + Sync) -> NamedTensorMap {
    NamedTensorMap::from_tensors(
        map.tensors()
            .par_iter()
            .map(|(k, t)| (k.clone(), f(t)))
            .collect(),
    )
}

pub(crate) fn ensure_compatible(a: &NamedTensorMap, b: &NamedTensorMap) -> Result<()> {
    validate_compatibility(a, b).into_result()
}

/// `finetuned - base`, key by key.
pub fn extract(finetuned: &NamedTensorMap, base: &NamedTensorMap) -> Result<TaskVector> {
    ensure_compatible(finetuned, base)?;
    let tensors: BTreeMap<String, Tensor> = finetuned
        .tensors()
        .par_iter()
        .map(|(k, ft)| {
            let b = base.get(k).expect("compatible");
            let data = ft
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (x as f64 - y as f64) as f32)
                .collect();
            (k.clone(), ft.with_data(data))
        })
        .collect();
    Ok(TaskVector::new(NamedTensorMap::from_tensors(tensors))?.with_base_fingerprint(base.content_hash()))
}

/// `base + coeff * tv`, key by key.
pub fn apply(base: &NamedTensorMap, tv: &TaskVector, coeff: f64) -> Result<NamedTensorMap> {
    ensure_compatible(base, tv.entries())?;
    let tensors: BTreeMap<String, Tensor> = base
        .tensors()
        .par_iter()
        .map(|(k, b)| {
            let r = tv.get(k).expect("compatible");
            let data = b
                .data()
                .iter()
                .zip(r.data())
                .map(|(&x, &d)| (x as f64 + coeff * d as f64) as f32)
                .collect();
            (k.clone(), b.with_data(data))
        })
        .collect();
    Ok(NamedTensorMap::from_tensors(tensors))
}

/// Exact linear combination `sum_i c_i * tv_i`, accumulated per element in term order.
pub fn combine(terms: &[(f64, &TaskVector)]) -> Result<TaskVector> {
    let (_, first) = terms
        .first()
        .ok_or(Error::Empty("combine needs at least one term"))?;
    for (_, tv) in &terms[1..] {
        ensure_compatible(first.entries(), tv.entries())?;
    }
    let fingerprint = first
        .base_fingerprint()
        .filter(|fp| terms.iter().all(|(_, tv)| tv.base_fingerprint() == Some(*fp)))
        .map(str::to_string);

    let tensors: BTreeMap<String, Tensor> = first
        .entries()
        .tensors()
        .par_iter()
        .map(|(k, t0)| {
            let parts: Vec<(f64, &[f32])> = terms
                .iter()
                .map(|(c, tv)| (*c, tv.get(k).expect("compatible").data()))
                .collect();
            let data = (0..t0.numel())
                .map(|j| parts.iter().fold(0.0f64, |acc, (c, d)| acc + c * d[j] as f64) as f32)
                .collect();
            (k.clone(), t0.with_data(data))
        })
        .collect();
    Ok(TaskVector {
        entries: NamedTensorMap::from_tensors(tensors),
        base_fingerprint: fingerprint,
    })
}

/// Plain sum of task vectors.
pub fn sum(tvs: &[TaskVector]) -> Result<TaskVector> {
    let terms: Vec<(f64, &TaskVector)> = tvs.iter().map(|tv| (1.0, tv)).collect();
    combine(&terms)
}

/// Uniform mean of task vectors.
pub fn mean(tvs: &[TaskVector]) -> Result<TaskVector> {
    let w = 1.0 / tvs.len().max(1) as f64;
    let terms: Vec<(f64, &TaskVector)> = tvs.iter().map(|tv| (w, tv)).collect();
    combine(&terms)
}

/// Squared Euclidean norm of one tensor, accumulated sequentially.
pub fn squared_norm(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| v as f64 * v as f64).sum()
}

/// Euclidean norm over the concatenation of all entries.
pub fn norm(tv: &TaskVector) -> f64 {
    let partials: Vec<f64> = tv
        .entries()
        .tensors()
        .par_iter()
        .map(|(_, t)| squared_norm(t))
        .collect();
    partials.iter().sum::<f64>().sqrt()
}
