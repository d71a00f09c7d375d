//! Forgetting and merging experiments on toy models.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{generate_task, mix_seed, Dataset, SplitSizes, SyntheticTaskSpec};
use super::mlp::{evaluate_model, train_model, Init, ToyMlpSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::merge::{self, MergeMethod};
use crate::scaling::{self, ScalingSchedule, Shape, TradeoffCandidate, DEFAULT_TARGET_WEIGHT};
use crate::search::{grid_search, EvalResult, Grid, Split};
use crate::task_vector::{self, TaskVector};
use crate::tensor_store::NamedTensorMap;
use crate::topology::{infer_depths, DepthMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub num_tasks: usize,
    /// Tasks seen only in pre-training, read out through their own heads.
    pub pretrain_tasks: usize,
    /// Pre-training tasks label by cluster group instead of by cluster.
    pub coarse_pretraining: bool,
    /// `num_heads`, `in_dim` and `num_classes` are taken from the tasks.
    pub model: ToyMlpSpec,
    /// Template; `seed`, `world_seed` and `head` are set per task.
    pub task: SyntheticTaskSpec,
    pub pretrain: TrainConfig,
    /// Fits the heads of the experiment tasks on the frozen pre-trained trunk.
    pub probe: TrainConfig,
    pub finetune: TrainConfig,
    pub gamma_grid: Grid,
    pub target_weight: f64,
    pub shape: Shape,
    pub lambda_grid: Grid,
    pub beta_grid: Grid,
    /// Concurrent seeds and grid points.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![1, 2, 3, 4, 5],
            num_tasks: 3,
            pretrain_tasks: 12,
            coarse_pretraining: false,
            model: ToyMlpSpec {
                width: 48,
                ..Default::default()
            },
            task: SyntheticTaskSpec {
                in_dim: 4,
                num_clusters: 64,
                cluster_spread: 0.1,
                samples_per_split: SplitSizes {
                    train: 512,
                    val: 512,
                    test: 1024,
                },
                ..Default::default()
            },
            pretrain: TrainConfig {
                epochs: 20,
                learning_rate: 0.05,
                ..Default::default()
            },
            probe: TrainConfig {
                epochs: 10,
                learning_rate: 0.05,
                train_trunk: false,
                ..Default::default()
            },
            finetune: TrainConfig {
                epochs: 15,
                learning_rate: 0.02,
                train_heads: false,
                ..Default::default()
            },
            gamma_grid: Grid::range(0.0, 1.0, 0.1).expect("static grid"),
            target_weight: DEFAULT_TARGET_WEIGHT,
            shape: Shape::Linear,
            lambda_grid: Grid::unit(),
            beta_grid: Grid::unit(),
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("experiment needs at least one seed".into()));
        }
        if self.num_tasks < 2 {
            return Err(Error::InvalidConfig("experiment needs at least two tasks".into()));
        }
        self.model_spec().validate()
    }

    pub fn model_spec(&self) -> ToyMlpSpec {
        ToyMlpSpec {
            in_dim: self.task.in_dim,
            num_classes: self.task.num_classes,
            num_heads: self.num_tasks + self.pretrain_tasks,
            ..self.model
        }
    }

    pub fn task_specs(&self, seed: u64) -> Vec<SyntheticTaskSpec> {
        (0..self.num_tasks)
            .map(|t| SyntheticTaskSpec {
                seed: mix_seed(seed, 0x100 + t as u64),
                world_seed: seed,
                head: t,
                ..self.task.clone()
            })
            .collect()
    }

    pub fn datasets(&self, seed: u64) -> Vec<Dataset> {
        self.task_specs(seed).iter().map(generate_task).collect()
    }

    /// Pre-training tasks, on heads after those of the experiment tasks.
    pub fn pretrain_datasets(&self, seed: u64) -> Vec<Dataset> {
        (0..self.pretrain_tasks)
            .map(|k| {
                generate_task(&SyntheticTaskSpec {
                    seed: mix_seed(seed, 0x200 + k as u64),
                    world_seed: seed,
                    head: self.num_tasks + k,
                    coarse: self.coarse_pretraining,
                    ..self.task.clone()
                })
            })
            .collect()
    }

    fn depths(&self) -> Result<DepthMap> {
        let keys: Vec<String> = super::mlp::ToyMlp::random(self.model_spec(), 0)?
            .to_map()
            .keys()
            .map(String::from)
            .collect();
        infer_depths(&keys, &self.model_spec().topology())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
    }
}

/// Checkpoints shared by both experiments for one seed.
#[derive(Clone, Debug)]
pub struct SeedModels {
    pub seed: u64,
    pub datasets: Vec<Dataset>,
    pub pretrained: NamedTensorMap,
    pub task_vectors: Vec<TaskVector>,
    /// `pretrained + task_vectors[t]`, the reference for target accuracy.
    pub finetuned: Vec<NamedTensorMap>,
}

/// Train the trunk on the pre-training tasks (or, with none configured, on the
/// experiment tasks), then fit the experiment tasks' heads on the frozen trunk.
pub fn pretrain(cfg: &ExperimentConfig, seed: u64, datasets: &[Dataset]) -> Result<NamedTensorMap> {
    let general = cfg.pretrain_datasets(seed);
    let refs: Vec<&Dataset> = match general.is_empty() {
        true => datasets.iter().collect(),
        false => general.iter().collect(),
    };
    let train = TrainConfig {
        seed: mix_seed(cfg.pretrain.seed, seed),
        ..cfg.pretrain.clone()
    };
    let trunk = train_model(Init::Random(cfg.model_spec(), mix_seed(seed, 0xB0)), &refs, &train)?;
    let probe = TrainConfig {
        seed: mix_seed(cfg.probe.seed, seed),
        ..cfg.probe.clone()
    };
    train_model(Init::Model(trunk), &datasets.iter().collect::<Vec<_>>(), &probe)
}

/// Pre-trained checkpoint for `seed`; the committed fixture uses seed 17.
pub fn fixture_model(cfg: &ExperimentConfig, seed: u64) -> Result<NamedTensorMap> {
    pretrain(cfg, seed, &cfg.datasets(seed))
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedModels> {
    let datasets = cfg.datasets(seed);
    let pretrained = pretrain(cfg, seed, &datasets)?;
    let mut task_vectors = Vec::with_capacity(datasets.len());
    let mut finetuned = Vec::with_capacity(datasets.len());
    for (t, data) in datasets.iter().enumerate() {
        let train = TrainConfig {
            seed: mix_seed(cfg.finetune.seed, mix_seed(seed, t as u64)),
            ..cfg.finetune.clone()
        };
        let ft = train_model(Init::Model(pretrained.clone()), &[data], &train)?;
        let tv = task_vector::extract(&ft, &pretrained)?;
        finetuned.push(task_vector::apply(&pretrained, &tv, 1.0)?);
        task_vectors.push(tv);
    }
    Ok(SeedModels {
        seed,
        datasets,
        pretrained,
        task_vectors,
        finetuned,
    })
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Vec<SeedModels>> {
    cfg.validate()?;
    cfg.pool()?
        .install(|| cfg.seeds.par_iter().map(|&s| prepare_seed(cfg, s)).collect())
}

/// Accuracy on every task, on both splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub val: Vec<f64>,
    pub test: Vec<f64>,
}

impl Evaluation {
    pub fn of(model: &NamedTensorMap, datasets: &[Dataset]) -> Result<Self> {
        let on = |split| -> Result<Vec<f64>> { datasets.iter().map(|d| evaluate_model(model, d, split)).collect() };
        Ok(Evaluation {
            val: on(Split::Val)?,
            test: on(Split::Test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[f64] {
        match split {
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Elementwise `self / reference`.
    fn normalized(&self, reference: &Evaluation) -> Result<Evaluation> {
        let div = |a: &[f64], r: &[f64]| -> Result<Vec<f64>> {
            a.iter()
                .zip(r)
                .map(|(a, r)| match *r > 0.0 {
                    true => Ok(a / r),
                    false => Err(Error::InvalidConfig("reference accuracy is zero".into())),
                })
                .collect()
        };
        Ok(Evaluation {
            val: div(&self.val, &reference.val)?,
            test: div(&self.test, &reference.test)?,
        })
    }
}

/// Target and control normalized accuracy, averaged over target tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalized {
    pub target: f64,
    pub control: f64,
}

/// One edited model: `pretrained + schedule(task_vectors[target])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub target: usize,
    pub raw: Evaluation,
    /// Target task over the fine-tuned accuracy, other tasks over the pre-trained one.
    pub normalized: Evaluation,
    pub references: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPoint {
    pub gamma: f64,
    pub rows: Vec<TargetRow>,
    pub val: Normalized,
    pub test: Normalized,
}

impl GammaPoint {
    fn new(gamma: f64, rows: Vec<TargetRow>) -> Self {
        let summarize = |split| {
            let n = rows.len() as f64;
            let target = rows.iter().map(|r| r.normalized.split(split)[r.target]).sum::<f64>() / n;
            let control = rows
                .iter()
                .map(|r| {
                    let xs = r.normalized.split(split);
                    let others: Vec<f64> = (0..xs.len()).filter(|&c| c != r.target).map(|c| xs[c]).collect();
                    others.iter().sum::<f64>() / others.len() as f64
                })
                .sum::<f64>()
                / n;
            Normalized { target, control }
        };
        GammaPoint {
            gamma,
            val: summarize(Split::Val),
            test: summarize(Split::Test),
            rows,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingSeed {
    pub seed: u64,
    pub pretrained: Evaluation,
    pub finetuned: Vec<Evaluation>,
    /// Shallow blocks scaled hardest: factor `gamma + (1 - gamma) * d / (L - 1)`.
    pub standard: Vec<GammaPoint>,
    /// The same factors reversed across depth, so deep blocks are scaled hardest.
    pub reversed: Vec<GammaPoint>,
    /// Chosen on validation with the configured target weight.
    pub selected_gamma: f64,
}

impl ForgettingSeed {
    fn at(points: &[GammaPoint], gamma: f64) -> &GammaPoint {
        points.iter().find(|p| p.gamma == gamma).expect("gamma from the grid")
    }

    pub fn selected(&self) -> &GammaPoint {
        Self::at(&self.standard, self.selected_gamma)
    }

    pub fn selected_reversed(&self) -> &GammaPoint {
        Self::at(&self.reversed, self.selected_gamma)
    }

    /// The γ = 1 point, i.e. the plain fine-tuned models.
    pub fn finetuned_point(&self) -> Option<&GammaPoint> {
        self.standard.iter().find(|p| p.gamma == 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingSummary {
    pub median_target_selected: f64,
    pub median_control_selected: f64,
    pub median_control_finetuned: f64,
    pub median_target_reversed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<ForgettingSeed>,
    /// Test-split medians over seeds.
    pub summary: ForgettingSummary,
}

pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn forgetting_seed(cfg: &ExperimentConfig, depths: &DepthMap, m: &SeedModels) -> Result<ForgettingSeed> {
    let pretrained = Evaluation::of(&m.pretrained, &m.datasets)?;
    let finetuned: Vec<Evaluation> = m
        .finetuned
        .iter()
        .map(|ft| Evaluation::of(ft, &m.datasets))
        .collect::<Result<_>>()?;
    let references: Vec<Evaluation> = (0..m.datasets.len())
        .map(|t| {
            let mut r = pretrained.clone();
            r.val[t] = finetuned[t].val[t];
            r.test[t] = finetuned[t].test[t];
            r
        })
        .collect();

    let mut standard = Vec::with_capacity(cfg.gamma_grid.len());
    let mut reversed = Vec::with_capacity(cfg.gamma_grid.len());
    for &gamma in cfg.gamma_grid.values() {
        let schedule = ScalingSchedule::new(gamma, 1.0 - gamma, cfg.shape);
        let mut factors = schedule.factors(depths.num_blocks())?;
        let row = |t: usize, tv: TaskVector| -> Result<TargetRow> {
            let model = task_vector::apply(&m.pretrained, &tv, 1.0)?;
            let raw = Evaluation::of(&model, &m.datasets)?;
            Ok(TargetRow {
                target: t,
                normalized: raw.normalized(&references[t])?,
                raw,
                references: references[t].clone(),
            })
        };
        let mut rows = Vec::new();
        for (t, tv) in m.task_vectors.iter().enumerate() {
            rows.push(row(t, scaling::scale(tv, depths, &schedule)?)?);
        }
        standard.push(GammaPoint::new(gamma, rows));

        factors.reverse();
        let outside = schedule.out_of_block_factor(depths.out_of_block_policy());
        let mut rows = Vec::new();
        for (t, tv) in m.task_vectors.iter().enumerate() {
            rows.push(row(t, scaling::scale_by(tv, depths, &factors, outside)?)?);
        }
        reversed.push(GammaPoint::new(gamma, rows));
    }

    let candidates: Vec<TradeoffCandidate> = standard
        .iter()
        .map(|p| TradeoffCandidate {
            gamma: p.gamma,
            target_norm_acc: p.val.target,
            control_norm_acc: p.val.control,
        })
        .collect();
    let selected_gamma = scaling::select_gamma(&candidates, cfg.target_weight)?.gamma;
    Ok(ForgettingSeed {
        seed: m.seed,
        pretrained,
        finetuned,
        standard,
        reversed,
        selected_gamma,
    })
}

/// Sweep γ over the grid for every seed and target task, in both the
/// standard and the reversed direction, and pick γ on validation.
pub fn forgetting_experiment(cfg: &ExperimentConfig) -> Result<ForgettingReport> {
    let prepared = prepare(cfg)?;
    forgetting_from(cfg, &prepared)
}

pub fn forgetting_from(cfg: &ExperimentConfig, prepared: &[SeedModels]) -> Result<ForgettingReport> {
    let depths = cfg.depths()?;
    let seeds: Vec<ForgettingSeed> = cfg
        .pool()?
        .install(|| prepared.par_iter().map(|m| forgetting_seed(cfg, &depths, m)).collect::<Result<_>>())?;
    let pick = |f: &dyn Fn(&ForgettingSeed) -> f64| median(&seeds.iter().map(f).collect::<Vec<_>>());
    let summary = ForgettingSummary {
        median_target_selected: pick(&|s| s.selected().test.target),
        median_control_selected: pick(&|s| s.selected().test.control),
        median_control_finetuned: pick(&|s| s.finetuned_point().map_or(f64::NAN, |p| p.test.control)),
        median_target_reversed: pick(&|s| s.selected_reversed().test.target),
    };
    Ok(ForgettingReport {
        config: cfg.clone(),
        seeds,
        summary,
    })
}

/// One merging method after coefficient selection on validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    /// λ for the baseline, β for the depth-scaled pipeline.
    pub coeff: f64,
    /// Intercept set by the norm heuristic, when used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// `(coefficient, mean normalized validation accuracy)` for every grid point.
    pub val_trace: Vec<(f64, f64)>,
    pub test_raw: Vec<f64>,
    pub test_normalized: Vec<f64>,
    pub test_average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergingSeed {
    pub seed: u64,
    pub pretrained: Evaluation,
    /// Each fine-tuned model on its own task; the normalization reference.
    pub finetuned: Evaluation,
    pub task_arithmetic: MethodResult,
    pub lines: MethodResult,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergingSummary {
    pub median_task_arithmetic: f64,
    pub median_lines: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergingReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<MergingSeed>,
    /// Test-split medians over seeds of the average normalized accuracy.
    pub summary: MergingSummary,
}

fn normalized_score(model: &NamedTensorMap, datasets: &[Dataset], reference: &[f64], split: Split) -> Result<EvalResult> {
    let mut per_task = std::collections::BTreeMap::new();
    let mut total = 0.0;
    for (t, d) in datasets.iter().enumerate() {
        let norm = evaluate_model(model, d, split)? / reference[t];
        per_task.insert(format!("task{t}"), norm);
        total += norm;
    }
    Ok(EvalResult {
        metric: total / datasets.len() as f64,
        per_task: Some(per_task),
    })
}

fn select_and_test<B>(
    cfg: &ExperimentConfig,
    m: &SeedModels,
    finetuned: &Evaluation,
    grid: &Grid,
    builder: B,
) -> Result<(MethodResult, NamedTensorMap)>
where
    B: Fn(f64) -> Result<NamedTensorMap> + Sync,
{
    let val_eval = |model: &NamedTensorMap| normalized_score(model, &m.datasets, &finetuned.val, Split::Val);
    let outcome = grid_search(&builder, grid, &val_eval, cfg.jobs)?;
    let best = builder(outcome.best_coeff)?;
    let test_raw: Vec<f64> = m
        .datasets
        .iter()
        .map(|d| evaluate_model(&best, d, Split::Test))
        .collect::<Result<_>>()?;
    let test_normalized: Vec<f64> = test_raw.iter().zip(&finetuned.test).map(|(a, r)| a / r).collect();
    let test_average = test_normalized.iter().sum::<f64>() / test_normalized.len() as f64;
    let result = MethodResult {
        coeff: outcome.best_coeff,
        alpha: None,
        val_trace: outcome.trace.iter().map(|p| (p.coeff, p.result.metric)).collect(),
        test_raw,
        test_normalized,
        test_average,
    };
    Ok((result, best))
}

fn merging_seed(cfg: &ExperimentConfig, depths: &DepthMap, m: &SeedModels) -> Result<MergingSeed> {
    let pretrained = Evaluation::of(&m.pretrained, &m.datasets)?;
    let finetuned = {
        let own = |split: Split| -> Result<Vec<f64>> {
            m.finetuned
                .iter()
                .zip(&m.datasets)
                .map(|(ft, d)| evaluate_model(ft, d, split))
                .collect()
        };
        Evaluation {
            val: own(Split::Val)?,
            test: own(Split::Test)?,
        }
    };
    let method = MergeMethod::TaskArithmetic;
    let merged = method.merge(&m.task_vectors)?;
    let (task_arithmetic, _) = select_and_test(cfg, m, &finetuned, &cfg.lambda_grid, |lambda| {
        task_vector::apply(&m.pretrained, &merged, lambda)
    })?;
    let (mut lines, _) = select_and_test(cfg, m, &finetuned, &cfg.beta_grid, |beta| {
        Ok(merge::merge_pipeline(&m.pretrained, &m.task_vectors, &method, depths, beta, cfg.shape)?.model)
    })?;
    lines.alpha = Some(scaling::alpha_heuristic(&m.task_vectors, &merged)?);
    Ok(MergingSeed {
        seed: m.seed,
        pretrained,
        finetuned,
        task_arithmetic,
        lines,
    })
}

/// Task Arithmetic with a uniform λ against the depth-scaled pipeline with β
/// tuned on validation, both reported on test.
pub fn merging_experiment(cfg: &ExperimentConfig) -> Result<MergingReport> {
    let prepared = prepare(cfg)?;
    merging_from(cfg, &prepared)
}

pub fn merging_from(cfg: &ExperimentConfig, prepared: &[SeedModels]) -> Result<MergingReport> {
    let depths = cfg.depths()?;
    // Grid points already run on the pool inside grid_search; seeds go one by one.
    let seeds: Vec<MergingSeed> = prepared
        .iter()
        .map(|m| merging_seed(cfg, &depths, m))
        .collect::<Result<_>>()?;
    let summary = MergingSummary {
        median_task_arithmetic: median(&seeds.iter().map(|s| s.task_arithmetic.test_average).collect::<Vec<_>>()),
        median_lines: median(&seeds.iter().map(|s| s.lines.test_average).collect::<Vec<_>>()),
    };
    Ok(MergingReport {
        config: cfg.clone(),
        seeds,
        summary,
    })
}

impl ForgettingReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed  gamma*  target  control  control@1  reversed");
        for s in &self.seeds {
            let sel = s.selected();
            let _ = writeln!(
                out,
                "{:<5} {:>6.2}  {:>6.4}  {:>7.4}  {:>9.4}  {:>8.4}",
                s.seed,
                s.selected_gamma,
                sel.test.target,
                sel.test.control,
                s.finetuned_point().map_or(f64::NAN, |p| p.test.control),
                s.selected_reversed().test.target,
            );
        }
        let m = &self.summary;
        let _ = writeln!(
            out,
            "median        {:>6.4}  {:>7.4}  {:>9.4}  {:>8.4}",
            m.median_target_selected, m.median_control_selected, m.median_control_finetuned, m.median_target_reversed
        );
        let _ = writeln!(out, "\ngamma  target  control  rev.target  rev.control   (test, median over seeds)");
        for (i, &gamma) in self.config.gamma_grid.values().iter().enumerate() {
            let med = |f: &dyn Fn(&ForgettingSeed) -> f64| median(&self.seeds.iter().map(f).collect::<Vec<_>>());
            let _ = writeln!(
                out,
                "{:>5.2}  {:>6.4}  {:>7.4}  {:>10.4}  {:>11.4}",
                gamma,
                med(&|s| s.standard[i].test.target),
                med(&|s| s.standard[i].test.control),
                med(&|s| s.reversed[i].test.target),
                med(&|s| s.reversed[i].test.control),
            );
        }
        out
    }
}

impl MergingReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed  lambda  TA       beta  alpha   TA+LiNeS");
        for s in &self.seeds {
            let _ = writeln!(
                out,
                "{:<5} {:>6.2}  {:>6.4}  {:>5.2}  {:>6.4}  {:>8.4}",
                s.seed,
                s.task_arithmetic.coeff,
                s.task_arithmetic.test_average,
                s.lines.coeff,
                s.lines.alpha.unwrap_or(f64::NAN),
                s.lines.test_average,
            );
        }
        let _ = writeln!(
            out,
            "median        {:>6.4}                {:>8.4}",
            self.summary.median_task_arithmetic, self.summary.median_lines
        );
        out
    }
}
