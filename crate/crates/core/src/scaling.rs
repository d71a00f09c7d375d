//! Layer-increasing scaling of residuals.
//!
//! Block `d` of `L` is multiplied by `alpha + beta * f(d / (L - 1))` where `f`
//! is the identity, square root or square. Out-of-block parameters follow the
//! depth map's policy and excluded parameters pass through untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task_vector::{self, TaskVector};
use crate::topology::{Assignment, DepthMap, OutOfBlockPolicy};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    #[default]
    Linear,
    Sqrt,
    Quadratic,
}

impl Shape {
    fn apply(self, frac: f64) -> f64 {
        match self {
            Shape::Linear => frac,
            Shape::Sqrt => frac.sqrt(),
            Shape::Quadratic => frac * frac,
        }
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Shape::Linear),
            "sqrt" => Ok(Shape::Sqrt),
            "quadratic" => Ok(Shape::Quadratic),
            other => Err(Error::InvalidConfig(format!(
                "unknown schedule shape {other:?} (expected linear, sqrt or quadratic)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSchedule {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub shape: Shape,
}

impl ScalingSchedule {
    pub fn new(alpha: f64, beta: f64, shape: Shape) -> Self {
        ScalingSchedule { alpha, beta, shape }
    }

    pub fn linear(alpha: f64, beta: f64) -> Self {
        Self::new(alpha, beta, Shape::Linear)
    }

    /// Shallowest block scaled by `gamma`, deepest left at 1.
    pub fn from_gamma(gamma: f64) -> Self {
        Self::linear(gamma, 1.0 - gamma)
    }

    pub fn identity() -> Self {
        Self::linear(1.0, 0.0)
    }

    /// Factor for 0-based block `depth` out of `num_blocks`.
    pub fn factor(&self, depth: usize, num_blocks: usize) -> Result<f64> {
        if num_blocks < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_blocks must be at least 2, got {num_blocks}"
            )));
        }
        if depth >= num_blocks {
            return Err(Error::DepthOutOfRange {
                key: String::new(),
                depth: depth.to_string(),
                num_blocks,
            });
        }
        let frac = depth as f64 / (num_blocks - 1) as f64;
        Ok(self.alpha + self.beta * self.shape.apply(frac))
    }

    pub fn factors(&self, num_blocks: usize) -> Result<Vec<f64>> {
        (0..num_blocks).map(|d| self.factor(d, num_blocks)).collect()
    }

    pub fn out_of_block_factor(&self, policy: OutOfBlockPolicy) -> f64 {
        match policy {
            OutOfBlockPolicy::Alpha => self.alpha,
            OutOfBlockPolicy::One => 1.0,
            OutOfBlockPolicy::Zero => 0.0,
        }
    }
}

/// Scale each residual block of `tv` by its depth factor.
pub fn scale(tv: &TaskVector, depths: &DepthMap, schedule: &ScalingSchedule) -> Result<TaskVector> {
    let factors = schedule.factors(depths.num_blocks())?;
    let outside = schedule.out_of_block_factor(depths.out_of_block_policy());
    scale_by(tv, depths, &factors, outside)
}

/// Multiply block `d` by `block_factors[d]`, out-of-block entries by `outside`.
pub fn scale_by(
    tv: &TaskVector,
    depths: &DepthMap,
    block_factors: &[f64],
    outside: f64,
) -> Result<TaskVector> {
    if block_factors.len() != depths.num_blocks() {
        return Err(Error::InvalidConfig(format!(
            "{} block factors for {} blocks",
            block_factors.len(),
            depths.num_blocks()
        )));
    }
    if let Some(missing) = tv.keys().find(|k| depths.get(k).is_none()) {
        return Err(Error::MissingDepth(missing.to_string()));
    }
    Ok(tv.map_tensors(|key, t| {
        let factor = match depths.get(key).expect("checked above") {
            Assignment::Block(d) => block_factors[d],
            Assignment::OutOfBlock => outside,
            Assignment::Excluded => return t.clone(),
        };
        t.map(|v| (v as f64 * factor) as f32)
    }))
}

/// Intercept that normalizes a merged vector's norm to that of plain summation:
/// `(1/N) * ||sum(tvs)|| / ||merged||`.
pub fn alpha_heuristic(tvs: &[TaskVector], merged: &TaskVector) -> Result<f64> {
    if tvs.is_empty() {
        return Err(Error::Empty("alpha heuristic needs at least one task vector"));
    }
    task_vector::ensure_compatible(tvs[0].entries(), merged.entries())?;
    let merged_norm = task_vector::norm(merged);
    if merged_norm == 0.0 {
        return Err(Error::DegenerateMerge);
    }
    let summed = task_vector::sum(tvs)?;
    let n = tvs.len() as f64;
    Ok((1.0 / n) * (task_vector::norm(&summed) / merged_norm))
}

/// One point of a target/control trade-off sweep, accuracies already normalized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCandidate {
    pub gamma: f64,
    pub target_norm_acc: f64,
    pub control_norm_acc: f64,
}

impl TradeoffCandidate {
    pub fn score(&self, w_target: f64) -> f64 {
        w_target * self.target_norm_acc + self.control_norm_acc
    }
}

pub const DEFAULT_TARGET_WEIGHT: f64 = 2.0;

/// Candidate maximizing `w_target * target + control`; ties go to the larger gamma.
pub fn select_gamma(candidates: &[TradeoffCandidate], w_target: f64) -> Result<TradeoffCandidate> {
    let mut best: Option<(f64, TradeoffCandidate)> = None;
    for c in candidates {
        let s = c.score(w_target);
        best = match best {
            Some((bs, b)) if s < bs || (s == bs && c.gamma <= b.gamma) => Some((bs, b)),
            _ => Some((s, *c)),
        };
    }
    best.map(|(_, c)| c)
        .ok_or(Error::Empty("no trade-off candidates"))
}
