//! Merging functions and weight interpolation schemes, each composable with
//! depth scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaling::{self, ScalingSchedule, Shape};
use crate::search::{EvalResult, Evaluator};
use crate::task_vector::{self, TaskVector};
use crate::tensor_store::{NamedTensorMap, Tensor};
use crate::topology::DepthMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiesConfig {
    /// Fraction of each task vector's entries kept by magnitude, in (0, 1].
    pub keep_fraction: f64,
}

impl Default for TiesConfig {
    fn default() -> Self {
        TiesConfig { keep_fraction: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub mask_lambda: f64,
    /// A coordinate survives iff it is relevant to at least this many tasks.
    pub prune_threshold: usize,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            mask_lambda: 0.4,
            prune_threshold: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MergeMethod {
    TaskArithmetic,
    Ties(TiesConfig),
    Consensus(ConsensusConfig),
}

impl MergeMethod {
    pub fn merge(&self, tvs: &[TaskVector]) -> Result<TaskVector> {
        match self {
            MergeMethod::TaskArithmetic => task_arithmetic_merge(tvs),
            MergeMethod::Ties(cfg) => ties_merge(tvs, cfg),
            MergeMethod::Consensus(cfg) => consensus_merge(tvs, cfg),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MergeMethod::TaskArithmetic => "ta",
            MergeMethod::Ties(_) => "ties",
            MergeMethod::Consensus(_) => "consensus",
        }
    }
}

fn require_nonempty(tvs: &[TaskVector]) -> Result<()> {
    if tvs.is_empty() {
        Err(Error::Empty("merge needs at least one task vector"))
    } else {
        Ok(())
    }
}

fn ensure_all_compatible(tvs: &[TaskVector]) -> Result<()> {
    for tv in &tvs[1..] {
        task_vector::ensure_compatible(tvs[0].entries(), tv.entries())?;
    }
    Ok(())
}

/// Per-key sum of the task vectors.
pub fn task_arithmetic_merge(tvs: &[TaskVector]) -> Result<TaskVector> {
    require_nonempty(tvs)?;
    task_vector::sum(tvs)
}

/// Entries of `tv` whose magnitude ranks in the top `keep_fraction`, the rest zeroed.
///
/// The cut is global over the concatenation of all tensors. Entries tied with
/// the k-th largest magnitude are all kept.
pub fn trim_top_magnitude(tv: &TaskVector, keep_fraction: f64) -> Result<TaskVector> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "keep_fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    let mut mags: Vec<f32> = tv
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
        .collect();
    if mags.is_empty() {
        return Ok(tv.clone());
    }
    let n = mags.len();
    let k = ((keep_fraction * n as f64).ceil() as usize).clamp(1, n);
    let (_, kth, _) = mags.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    let threshold = *kth;
    Ok(tv.map_tensors(|_, t| t.map(|v| if v.abs() >= threshold { v } else { 0.0 })))
}

/// Trim, elect a sign per coordinate, then average the entries agreeing with it.
pub fn ties_merge(tvs: &[TaskVector], cfg: &TiesConfig) -> Result<TaskVector> {
    require_nonempty(tvs)?;
    ensure_all_compatible(tvs)?;
    let trimmed = tvs
        .iter()
        .map(|tv| trim_top_magnitude(tv, cfg.keep_fraction))
        .collect::<Result<Vec<_>>>()?;

    let mut sign_ties = 0usize;
    let mut out = NamedTensorMap::new();
    for (key, t0) in trimmed[0].iter() {
        let columns: Vec<&[f32]> = trimmed.iter().map(|tv| tv.get(key).unwrap().data()).collect();
        let data = (0..t0.numel())
            .map(|j| {
                let mass: f64 = columns.iter().map(|c| c[j] as f64).sum();
                let any = columns.iter().any(|c| c[j] != 0.0);
                if any && mass == 0.0 {
                    sign_ties += 1;
                }
                let positive = mass >= 0.0;
                let (total, count) = columns
                    .iter()
                    .map(|c| c[j])
                    .filter(|&v| v != 0.0 && (v > 0.0) == positive)
                    .fold((0.0f64, 0usize), |(s, n), v| (s + v as f64, n + 1));
                if count == 0 {
                    0.0
                } else {
                    (total / count as f64) as f32
                }
            })
            .collect();
        out.insert(key, t0.with_data(data));
    }
    if sign_ties > 0 {
        log::debug!("ties merge: {sign_ties} coordinates with balanced sign mass elected positive");
    }
    Ok(TaskVector::new(out)?)
}

/// Sum of task vectors with coordinates relevant to fewer than
/// `prune_threshold` tasks removed. Task `t` finds coordinate `j` relevant iff
/// `|tau_t[j]| >= mask_lambda * |tau_sum[j] - tau_t[j]|`.
pub fn consensus_merge(tvs: &[TaskVector], cfg: &ConsensusConfig) -> Result<TaskVector> {
    if tvs.len() < 2 {
        return Err(Error::InvalidConfig(
            "consensus merging needs at least two task vectors".into(),
        ));
    }
    if !(cfg.mask_lambda > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "mask_lambda must be positive, got {}",
            cfg.mask_lambda
        )));
    }
    if !(1..=2).contains(&cfg.prune_threshold) {
        return Err(Error::InvalidConfig(format!(
            "prune_threshold must be 1 or 2, got {}",
            cfg.prune_threshold
        )));
    }
    ensure_all_compatible(tvs)?;

    let mut out = NamedTensorMap::new();
    for (key, t0) in tvs[0].iter() {
        let columns: Vec<&[f32]> = tvs.iter().map(|tv| tv.get(key).unwrap().data()).collect();
        let data = (0..t0.numel())
            .map(|j| {
                let total: f64 = columns.iter().fold(0.0, |acc, c| acc + c[j] as f64);
                let relevant = columns
                    .iter()
                    .filter(|c| {
                        let own = c[j] as f64;
                        own.abs() >= cfg.mask_lambda * (total - own).abs()
                    })
                    .count();
                if relevant >= cfg.prune_threshold {
                    total as f32
                } else {
                    0.0
                }
            })
            .collect();
        out.insert(key, t0.with_data(data));
    }
    TaskVector::new(out)
}

#[derive(Clone, Debug)]
pub struct MergedModel {
    pub model: NamedTensorMap,
    /// Intercept chosen by the norm heuristic.
    pub alpha: f64,
}

/// Merge, set the intercept by the norm heuristic, scale with slope `beta`, add to `base`.
pub fn merge_pipeline(
    base: &NamedTensorMap,
    tvs: &[TaskVector],
    method: &MergeMethod,
    depths: &DepthMap,
    beta: f64,
    shape: Shape,
) -> Result<MergedModel> {
    let merged = method.merge(tvs)?;
    let alpha = scaling::alpha_heuristic(tvs, &merged)?;
    let scaled = scaling::scale(&merged, depths, &ScalingSchedule::new(alpha, beta, shape))?;
    Ok(MergedModel {
        model: task_vector::apply(base, &scaled, 1.0)?,
        alpha,
    })
}

/// Baseline: `base + lambda * method(tvs)` with no depth scaling.
pub fn merge_uniform(
    base: &NamedTensorMap,
    tvs: &[TaskVector],
    method: &MergeMethod,
    lambda: f64,
) -> Result<NamedTensorMap> {
    let merged = method.merge(tvs)?;
    task_vector::apply(base, &merged, lambda)
}

fn member_residuals(members: &[NamedTensorMap], base: &NamedTensorMap) -> Result<Vec<TaskVector>> {
    members.iter().map(|m| task_vector::extract(m, base)).collect()
}

/// `base + mean(member - base)`, with `base` as an extra zero-residual member if asked.
pub fn uniform_soup(
    members: &[NamedTensorMap],
    base: &NamedTensorMap,
    include_base: bool,
) -> Result<NamedTensorMap> {
    if members.is_empty() {
        return Err(Error::Empty("soup needs at least one member"));
    }
    let mut residuals = member_residuals(members, base)?;
    if include_base {
        residuals.push(TaskVector::zeros_like(base));
    }
    task_vector::apply(base, &task_vector::mean(&residuals)?, 1.0)
}

/// Element-wise mean of checkpoint weights.
pub fn average_weights(members: &[&NamedTensorMap]) -> Result<NamedTensorMap> {
    let first = members
        .first()
        .ok_or(Error::Empty("nothing to average"))?;
    for m in &members[1..] {
        task_vector::ensure_compatible(first, m)?;
    }
    let w = 1.0 / members.len() as f64;
    let mut out = NamedTensorMap::new();
    for (key, t0) in first.iter() {
        let cols: Vec<&[f32]> = members.iter().map(|m| m.get(key).unwrap().data()).collect();
        let data = (0..t0.numel())
            .map(|j| (cols.iter().fold(0.0f64, |acc, c| acc + c[j] as f64) * w) as f32)
            .collect();
        out.insert(key, t0.with_data(data));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoupStep {
    pub candidate: usize,
    pub metric: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct SoupResult {
    pub model: NamedTensorMap,
    /// Member indices in the order they joined the soup.
    pub selected: Vec<usize>,
    /// One step per candidate after the seed, in metric order.
    pub history: Vec<SoupStep>,
    /// Individual validation metric of every member, by member index.
    pub individual: Vec<f64>,
    /// Validation metric of the returned model.
    pub metric: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GreedySoupOptions {
    /// Require strict improvement instead of non-degradation.
    pub strict: bool,
    /// Apply depth scaling with intercept 1 and this slope to the final soup residual.
    pub lines_beta: Option<f64>,
}

fn evaluate_as(
    evaluator: &dyn Evaluator,
    model: &NamedTensorMap,
    context: impl FnOnce() -> String,
) -> Result<EvalResult> {
    evaluator.evaluate(model).map_err(|e| Error::EvaluatorFailed {
        context: context(),
        source: Box::new(e),
    })
}

/// Greedy soup: visit members best-first and keep each one whose addition
/// does not lower the soup's validation metric.
pub fn greedy_soup(
    members: &[NamedTensorMap],
    base: &NamedTensorMap,
    evaluator: &dyn Evaluator,
    depths: Option<&DepthMap>,
    opts: GreedySoupOptions,
) -> Result<SoupResult> {
    if members.is_empty() {
        return Err(Error::Empty("soup needs at least one member"));
    }
    for m in members {
        task_vector::ensure_compatible(m, base)?;
    }
    if opts.lines_beta.is_some() && depths.is_none() {
        return Err(Error::InvalidConfig(
            "greedy soup with depth scaling needs a depth map".into(),
        ));
    }

    let individual = members
        .iter()
        .enumerate()
        .map(|(i, m)| evaluate_as(evaluator, m, || format!("soup member {i}")).map(|r| r.metric))
        .collect::<Result<Vec<f64>>>()?;

    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| individual[b].total_cmp(&individual[a]));

    let mut selected = vec![order[0]];
    let mut current = individual[order[0]];
    let mut soup = members[order[0]].clone();
    let mut history = Vec::with_capacity(members.len() - 1);
    for &candidate in &order[1..] {
        let mut trial_set = selected.clone();
        trial_set.push(candidate);
        let refs: Vec<&NamedTensorMap> = trial_set.iter().map(|&i| &members[i]).collect();
        let trial = average_weights(&refs)?;
        let metric = evaluate_as(evaluator, &trial, || {
            format!("tentative soup with candidate {candidate}")
        })?
        .metric;
        let accepted = if opts.strict {
            metric > current
        } else {
            metric >= current
        };
        history.push(SoupStep {
            candidate,
            metric,
            accepted,
        });
        if accepted {
            selected = trial_set;
            current = metric;
            soup = trial;
        }
    }

    let (model, metric) = match (opts.lines_beta, depths) {
        (Some(beta), Some(depths)) => {
            let residual = task_vector::extract(&soup, base)?;
            let scaled = scaling::scale(&residual, depths, &ScalingSchedule::linear(1.0, beta))?;
            let model = task_vector::apply(base, &scaled, 1.0)?;
            let metric = evaluate_as(evaluator, &model, || "scaled soup".to_string())?.metric;
            (model, metric)
        }
        _ => (soup, current),
    };

    Ok(SoupResult {
        model,
        selected,
        history,
        individual,
        metric,
    })
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must be in [0, 1], got {v}")))
    }
}

/// `base + gamma * tv'`, where `tv'` is `tv` optionally depth-scaled first.
pub fn wiseft_interpolate(
    base: &NamedTensorMap,
    tv: &TaskVector,
    gamma: f64,
    lines: Option<(&DepthMap, &ScalingSchedule)>,
) -> Result<NamedTensorMap> {
    check_unit_interval("gamma", gamma)?;
    match lines {
        Some((depths, schedule)) => {
            task_vector::apply(base, &scaling::scale(tv, depths, schedule)?, gamma)
        }
        None => task_vector::apply(base, tv, gamma),
    }
}

/// `sft + lam * tv1 + (1 - lam) * tv2`; with a depth map the combined residual
/// is scaled with intercept 1 and slope 1 before adding.
pub fn rewarded_interpolate(
    sft: &NamedTensorMap,
    tv1: &TaskVector,
    tv2: &TaskVector,
    lam: f64,
    lines: Option<&DepthMap>,
) -> Result<NamedTensorMap> {
    check_unit_interval("lambda", lam)?;
    let mut residual = task_vector::combine(&[(lam, tv1), (1.0 - lam, tv2)])?;
    if let Some(depths) = lines {
        residual = scaling::scale(&residual, depths, &ScalingSchedule::linear(1.0, 1.0))?;
    }
    task_vector::apply(sft, &residual, 1.0)
}

/// Zero-filled tensor map with the layout of `like`.
pub fn zeros_like(like: &NamedTensorMap) -> NamedTensorMap {
    let mut out = NamedTensorMap::new();
    for (k, t) in like.iter() {
        out.insert(k, Tensor::zeros(t.shape().to_vec()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{infer_depths, TopologyConfig};

    fn tv(v: &[f32]) -> TaskVector {
        TaskVector::new(NamedTensorMap::new().with("w", Tensor::vector(v.to_vec()))).unwrap()
    }

    fn data(tv: &TaskVector) -> Vec<f32> {
        tv.get("w").unwrap().data().to_vec()
    }

    fn blocks(pairs: &[(&str, f32)]) -> NamedTensorMap {
        let mut m = NamedTensorMap::new();
        for (k, v) in pairs {
            m.insert(*k, Tensor::vector(vec![*v]));
        }
        m
    }

    #[test]
    fn task_arithmetic_examples() {
        assert_eq!(data(&task_arithmetic_merge(&[tv(&[1.0, 2.0])]).unwrap()), vec![1.0, 2.0]);
        assert_eq!(
            data(&task_arithmetic_merge(&[tv(&[1.0, 2.0]), tv(&[3.0, -1.0])]).unwrap()),
            vec![4.0, 1.0]
        );
        assert_eq!(
            data(&task_arithmetic_merge(&[tv(&[1.0, -2.0]), tv(&[-1.0, 2.0])]).unwrap()),
            vec![0.0, 0.0]
        );
        assert!(task_arithmetic_merge(&[]).is_err());
    }

    #[test]
    fn ties_examples() {
        let keep_all = TiesConfig { keep_fraction: 1.0 };
        let single = tv(&[0.5, -1.5, 2.0]);
        assert_eq!(data(&ties_merge(&[single.clone()], &keep_all).unwrap()), data(&single));
        assert_eq!(
            data(&ties_merge(&[tv(&[2.0, -1.0]), tv(&[-1.0, 3.0])], &keep_all).unwrap()),
            vec![2.0, 3.0]
        );
        let half = TiesConfig { keep_fraction: 0.5 };
        assert_eq!(
            data(&ties_merge(&[tv(&[3.0, 0.1, -2.0, 0.5])], &half).unwrap()),
            vec![3.0, 0.0, -2.0, 0.0]
        );
        assert!(ties_merge(&[single], &TiesConfig { keep_fraction: 0.0 }).is_err());
    }

    #[test]
    fn ties_sign_tie_goes_positive() {
        let keep_all = TiesConfig { keep_fraction: 1.0 };
        let out = ties_merge(&[tv(&[2.0]), tv(&[-2.0])], &keep_all).unwrap();
        assert_eq!(data(&out), vec![2.0]);
    }

    #[test]
    fn consensus_examples() {
        let cfg = ConsensusConfig::default();
        assert_eq!(
            data(&consensus_merge(&[tv(&[1.0, 1.0]), tv(&[1.0, 1.0])], &cfg).unwrap()),
            vec![2.0, 2.0]
        );
        assert_eq!(
            data(&consensus_merge(&[tv(&[1.0, 0.0]), tv(&[0.0, 1.0])], &cfg).unwrap()),
            vec![0.0, 0.0]
        );
        let loose = ConsensusConfig {
            prune_threshold: 1,
            ..cfg
        };
        assert_eq!(
            data(&consensus_merge(&[tv(&[1.0, 0.0]), tv(&[0.0, 1.0])], &loose).unwrap()),
            vec![1.0, 1.0]
        );
        assert!(consensus_merge(&[tv(&[1.0])], &cfg).is_err());
        let bad = ConsensusConfig {
            prune_threshold: 3,
            ..cfg
        };
        assert!(consensus_merge(&[tv(&[1.0]), tv(&[1.0])], &bad).is_err());
    }

    fn two_block_depths(keys: &[&str]) -> DepthMap {
        infer_depths(keys, &TopologyConfig::new(".layer{d}.", 2)).unwrap()
    }

    #[test]
    fn pipeline_ta_beta_zero_is_mean() {
        let base = blocks(&[("b.layer0.w", 1.0), ("b.layer1.w", 1.0)]);
        let depths = two_block_depths(&["b.layer0.w", "b.layer1.w"]);
        let t1 = TaskVector::new(blocks(&[("b.layer0.w", 2.0), ("b.layer1.w", 4.0)])).unwrap();
        let t2 = TaskVector::new(blocks(&[("b.layer0.w", 6.0), ("b.layer1.w", 0.0)])).unwrap();
        let out = merge_pipeline(
            &base,
            &[t1, t2],
            &MergeMethod::TaskArithmetic,
            &depths,
            0.0,
            Shape::Linear,
        )
        .unwrap();
        assert_eq!(out.alpha, 0.5);
        assert_eq!(out.model.get("b.layer0.w").unwrap().data(), &[5.0]);
        assert_eq!(out.model.get("b.layer1.w").unwrap().data(), &[3.0]);
    }

    #[test]
    fn pipeline_single_ties_has_unit_alpha() {
        let base = blocks(&[("b.layer0.w", 0.0), ("b.layer1.w", 0.0)]);
        let depths = two_block_depths(&["b.layer0.w", "b.layer1.w"]);
        let t = TaskVector::new(blocks(&[("b.layer0.w", 2.0), ("b.layer1.w", -3.0)])).unwrap();
        let out = merge_pipeline(
            &base,
            &[t],
            &MergeMethod::Ties(TiesConfig { keep_fraction: 1.0 }),
            &depths,
            0.0,
            Shape::Linear,
        )
        .unwrap();
        assert_eq!(out.alpha, 1.0);
        assert_eq!(out.model.get("b.layer1.w").unwrap().data(), &[-3.0]);
    }

    #[test]
    fn pipeline_degenerate_merge() {
        let base = blocks(&[("b.layer0.w", 0.0), ("b.layer1.w", 0.0)]);
        let depths = two_block_depths(&["b.layer0.w", "b.layer1.w"]);
        let t = TaskVector::new(blocks(&[("b.layer0.w", 1.0), ("b.layer1.w", 1.0)])).unwrap();
        let neg = t.scaled(-1.0);
        assert!(matches!(
            merge_pipeline(&base, &[t, neg], &MergeMethod::TaskArithmetic, &depths, 0.5, Shape::Linear),
            Err(Error::DegenerateMerge)
        ));
    }

    #[test]
    fn uniform_soup_examples() {
        let base = blocks(&[("w", 1.0)]);
        let a = blocks(&[("w", 3.0)]);
        let b = blocks(&[("w", 7.0)]);
        let two = uniform_soup(&[a.clone(), b], &base, false).unwrap();
        assert_eq!(two.get("w").unwrap().data(), &[5.0]);
        let with_base = uniform_soup(&[a], &base, true).unwrap();
        assert_eq!(with_base.get("w").unwrap().data(), &[2.0]);
        assert!(uniform_soup(&[base.clone()], &base, false).unwrap().bit_eq(&base));
        assert!(uniform_soup(&[], &base, false).is_err());
    }

    #[test]
    fn wiseft_examples() {
        let base = blocks(&[("b.layer0.w", 1.0), ("b.layer1.w", 1.0)]);
        let depths = two_block_depths(&["b.layer0.w", "b.layer1.w"]);
        let t = TaskVector::new(blocks(&[("b.layer0.w", 4.0), ("b.layer1.w", 4.0)])).unwrap();
        let half = ScalingSchedule::linear(0.5, 0.5);
        let out = wiseft_interpolate(&base, &t, 1.0, Some((&depths, &half))).unwrap();
        assert_eq!(out.get("b.layer0.w").unwrap().data(), &[3.0]);
        assert_eq!(out.get("b.layer1.w").unwrap().data(), &[5.0]);
        let zero = wiseft_interpolate(&base, &t, 0.0, Some((&depths, &half))).unwrap();
        assert!(zero.bit_eq(&base));
        assert!(wiseft_interpolate(&base, &t, 1.5, None).is_err());
    }

    #[test]
    fn rewarded_examples() {
        let sft = blocks(&[("b.layer0.w", 10.0), ("b.layer1.w", 10.0)]);
        let depths = two_block_depths(&["b.layer0.w", "b.layer1.w"]);
        let t1 = TaskVector::new(blocks(&[("b.layer0.w", 2.0), ("b.layer1.w", 0.0)])).unwrap();
        let t2 = TaskVector::new(blocks(&[("b.layer0.w", 0.0), ("b.layer1.w", 2.0)])).unwrap();
        let out = rewarded_interpolate(&sft, &t1, &t2, 0.5, Some(&depths)).unwrap();
        assert_eq!(out.get("b.layer0.w").unwrap().data(), &[11.0]);
        assert_eq!(out.get("b.layer1.w").unwrap().data(), &[12.0]);
        let p1 = rewarded_interpolate(&sft, &t1, &t2, 1.0, None).unwrap();
        assert!(p1.bit_eq(&task_vector::apply(&sft, &t1, 1.0).unwrap()));
        assert!(rewarded_interpolate(&sft, &t1, &t2, -0.1, None).is_err());
    }
}
