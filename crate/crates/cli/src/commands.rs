use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use lines_core::merge::{self, GreedySoupOptions};
use lines_core::scaling::{self, ScalingSchedule};
use lines_core::search::{grid_search, SearchOutcome};
use lines_core::task_vector::{self, TaskVector};
use lines_core::tensor_store::{self, read_checkpoint, write_checkpoint};
use lines_core::topology::infer_depths;
use lines_core::toy::{self, experiment, ExperimentConfig, ToyEvaluator};
use lines_core::{
    Assignment, ConsensusConfig, DepthMap, DtypePolicy, EvaluatorSpec, Evaluator, Grid, LoadOptions,
    MergeMethod, NamedTensorMap, Shape, TiesConfig, TopologyConfig,
};
use serde::Serialize;

use crate::args::*;

/// A problem with how the command was invoked rather than with its inputs.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load(path: &Path) -> Result<NamedTensorMap> {
    Ok(read_checkpoint(path, LoadOptions::default())?)
}

fn load_tv(path: &Path) -> Result<TaskVector> {
    Ok(TaskVector::load(path)?)
}

fn save(map: &NamedTensorMap, path: &Path, dtype: DtypeArg) -> Result<()> {
    let policy = match dtype {
        DtypeArg::Preserve => DtypePolicy::Preserve,
        DtypeArg::F32 => DtypePolicy::ForceF32,
    };
    write_checkpoint(map, path, policy)?;
    Ok(())
}

fn emit<T: Serialize>(format: Format, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(value)?),
        Format::Text => print!("{}", text()),
    }
    Ok(())
}

impl TopologyArgs {
    fn config(&self) -> Result<Option<TopologyConfig>> {
        let mut cfg = match (&self.topology, &self.block_pattern, self.num_blocks) {
            (Some(path), _, _) => TopologyConfig::load(path)?,
            (None, Some(pattern), Some(n)) => TopologyConfig::new(pattern.clone(), n),
            _ => {
                if self.out_of_block.is_some() || !self.include_prefix.is_empty() {
                    return Err(usage("--out-of-block and --include-prefix need a topology"));
                }
                return Ok(None);
            }
        };
        if let Some(p) = self.out_of_block {
            cfg.out_of_block_policy = p.into();
        }
        if !self.include_prefix.is_empty() {
            cfg.include_prefixes = self.include_prefix.clone();
        }
        cfg.validate()?;
        Ok(Some(cfg))
    }

    fn depths_for(&self, keys: impl Iterator<Item = String>) -> Result<Option<DepthMap>> {
        match self.config()? {
            None => Ok(None),
            Some(cfg) => {
                let keys: Vec<String> = keys.collect();
                Ok(Some(infer_depths(&keys, &cfg)?))
            }
        }
    }

    fn require(&self, keys: impl Iterator<Item = String>, why: &str) -> Result<DepthMap> {
        self.depths_for(keys)?
            .ok_or_else(|| usage(format!("{why} needs --topology or --block-pattern/--num-blocks")))
    }
}

fn keys_of(map: &NamedTensorMap) -> impl Iterator<Item = String> + '_ {
    map.keys().map(String::from)
}

impl ScheduleArgs {
    fn schedule(&self) -> Result<ScalingSchedule> {
        let shape: Shape = self.shape.into();
        match (self.alpha, self.beta, self.gamma) {
            (Some(a), Some(b), None) => Ok(ScalingSchedule::new(a, b, shape)),
            (None, None, Some(g)) => Ok(ScalingSchedule {
                shape,
                ..ScalingSchedule::from_gamma(g)
            }),
            _ => Err(usage("give either --alpha and --beta, or --gamma")),
        }
    }
}

impl MergeArgs {
    fn method(&self) -> Result<MergeMethod> {
        let stray = |flag: &str| usage(format!("{flag} does not apply to --method {:?}", self.method));
        match self.method {
            MethodArg::Ta => {
                if self.keep.is_some() {
                    return Err(stray("--keep"));
                }
                if self.mask_lambda.is_some() || self.prune_threshold.is_some() {
                    return Err(stray("--mask-lambda/--prune-threshold"));
                }
                Ok(MergeMethod::TaskArithmetic)
            }
            MethodArg::Ties => {
                if self.mask_lambda.is_some() || self.prune_threshold.is_some() {
                    return Err(stray("--mask-lambda/--prune-threshold"));
                }
                let defaults = TiesConfig::default();
                Ok(MergeMethod::Ties(TiesConfig {
                    keep_fraction: self.keep.unwrap_or(defaults.keep_fraction),
                }))
            }
            MethodArg::Consensus => {
                if self.keep.is_some() {
                    return Err(stray("--keep"));
                }
                Ok(MergeMethod::Consensus(self.consensus(self.prune_threshold)))
            }
        }
    }

    fn consensus(&self, threshold: Option<usize>) -> ConsensusConfig {
        let defaults = ConsensusConfig::default();
        ConsensusConfig {
            mask_lambda: self.mask_lambda.unwrap_or(defaults.mask_lambda),
            prune_threshold: threshold.unwrap_or(defaults.prune_threshold),
        }
    }

    fn load(&self) -> Result<(NamedTensorMap, Vec<TaskVector>)> {
        let base = load(&self.base)?;
        let tvs = self
            .tv
            .iter()
            .map(|p| load_tv(p).with_context(|| format!("loading task vector {}", p.display())))
            .collect::<Result<_>>()?;
        Ok((base, tvs))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let jobs = cli.jobs.unwrap_or_else(rayon::current_num_threads).max(1);
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    let format = cli.format;
    match cli.command {
        Command::Extract {
            base,
            finetuned,
            out,
            dtype,
        } => {
            let tv = task_vector::extract(&load(&finetuned)?, &load(&base)?)?;
            save(&tv.to_checkpoint(), &out, dtype)
        }
        Command::Scale {
            tv,
            schedule,
            topology,
            out,
            dtype,
        } => {
            let tv = load_tv(&tv)?;
            let depths = topology.require(tv.keys().map(String::from), "scale")?;
            let scaled = scaling::scale(&tv, &depths, &schedule.schedule()?)?;
            save(&scaled.to_checkpoint(), &out, dtype)
        }
        Command::Merge {
            merge,
            beta,
            uniform_lambda,
            shape,
            topology,
            out,
        } => cmd_merge(format, &merge, beta, uniform_lambda, shape.into(), &topology, &out),
        Command::Soup {
            base,
            members,
            evaluator,
            include_base,
            strict,
            lines_beta,
            topology,
            out,
        } => {
            let base = load(&base)?;
            let members: Vec<NamedTensorMap> = members.iter().map(|p| load(p)).collect::<Result<_>>()?;
            match evaluator {
                None => {
                    let soup = merge::uniform_soup(&members, &base, include_base)?;
                    save(&soup, &out, DtypeArg::F32)
                }
                Some(spec) => {
                    let evaluator = spec.parse::<EvaluatorSpec>()?.build(lines_core::Split::Val)?;
                    let depths = match lines_beta {
                        Some(_) => Some(topology.require(keys_of(&base), "--lines-beta")?),
                        None => None,
                    };
                    let opts = GreedySoupOptions { strict, lines_beta };
                    let result = merge::greedy_soup(&members, &base, evaluator.as_ref(), depths.as_ref(), opts)?;
                    save(&result.model, &out, DtypeArg::F32)?;
                    #[derive(Serialize)]
                    struct Summary<'a> {
                        selected: &'a [usize],
                        individual: &'a [f64],
                        history: &'a [merge::SoupStep],
                        metric: f64,
                    }
                    let summary = Summary {
                        selected: &result.selected,
                        individual: &result.individual,
                        history: &result.history,
                        metric: result.metric,
                    };
                    emit(format, &summary, || {
                        format!("selected {:?}\nmetric {}\n", result.selected, result.metric)
                    })
                }
            }
        }
        Command::Interpolate(Interpolate::Wiseft {
            base,
            tv,
            gamma,
            alpha,
            beta,
            shape,
            topology,
            out,
        }) => {
            let base = load(&base)?;
            let tv = load_tv(&tv)?;
            let model = match (alpha, beta) {
                (Some(a), Some(b)) => {
                    let depths = topology.require(tv.keys().map(String::from), "depth scaling")?;
                    let schedule = ScalingSchedule::new(a, b, shape.into());
                    merge::wiseft_interpolate(&base, &tv, gamma, Some((&depths, &schedule)))?
                }
                _ => merge::wiseft_interpolate(&base, &tv, gamma, None)?,
            };
            save(&model, &out, DtypeArg::F32)
        }
        Command::Interpolate(Interpolate::Rewarded {
            sft,
            tv1,
            tv2,
            lambda,
            lines,
            topology,
            out,
        }) => {
            let sft = load(&sft)?;
            let (tv1, tv2) = (load_tv(&tv1)?, load_tv(&tv2)?);
            let depths = match lines {
                true => Some(topology.require(tv1.keys().map(String::from), "--lines")?),
                false => None,
            };
            let model = merge::rewarded_interpolate(&sft, &tv1, &tv2, lambda, depths.as_ref())?;
            save(&model, &out, DtypeArg::F32)
        }
        Command::Search {
            merge,
            param,
            grid,
            evaluator,
            split,
            shape,
            topology,
            out,
        } => cmd_search(format, jobs, &merge, param, grid, &evaluator, split, shape.into(), &topology, out.as_deref()),
        Command::Toy(toy) => cmd_toy(format, cli.jobs, toy),
        Command::Inspect { checkpoint, topology } => cmd_inspect(format, &checkpoint, &topology),
    }
}

fn cmd_merge(
    format: Format,
    args: &MergeArgs,
    beta: Option<f64>,
    uniform_lambda: Option<f64>,
    shape: Shape,
    topology: &TopologyArgs,
    out: &Path,
) -> Result<()> {
    let method = args.method()?;
    let (base, tvs) = args.load()?;
    #[derive(Serialize)]
    struct Summary {
        method: &'static str,
        #[serde(skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        beta: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        lambda: Option<f64>,
    }
    let summary = match (beta, uniform_lambda) {
        (Some(beta), None) => {
            let depths = topology.require(keys_of(&base), "merge --beta")?;
            let merged = merge::merge_pipeline(&base, &tvs, &method, &depths, beta, shape)?;
            save(&merged.model, out, DtypeArg::F32)?;
            Summary {
                method: method.name(),
                alpha: Some(merged.alpha),
                beta: Some(beta),
                lambda: None,
            }
        }
        (None, Some(lambda)) => {
            let model = merge::merge_uniform(&base, &tvs, &method, lambda)?;
            save(&model, out, DtypeArg::F32)?;
            Summary {
                method: method.name(),
                alpha: None,
                beta: None,
                lambda: Some(lambda),
            }
        }
        _ => return Err(usage("merge needs exactly one of --beta or --uniform-lambda")),
    };
    emit(format, &summary, || {
        let mut s = format!("method {}\n", summary.method);
        for (k, v) in [("alpha", summary.alpha), ("beta", summary.beta), ("lambda", summary.lambda)] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k} {v}");
            }
        }
        s
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(
    format: Format,
    jobs: usize,
    args: &MergeArgs,
    param: SearchParam,
    grid: Option<Grid>,
    evaluator: &str,
    split: SplitArg,
    shape: Shape,
    topology: &TopologyArgs,
    out: Option<&Path>,
) -> Result<()> {
    let first = args.method()?;
    let (base, tvs) = args.load()?;
    let grid = grid.unwrap_or_else(|| match args.method {
        MethodArg::Ties => Grid::ties(),
        _ => Grid::unit(),
    });
    let evaluator = evaluator.parse::<EvaluatorSpec>()?.build(split.into())?;
    let depths = match param {
        SearchParam::Beta => Some(topology.require(keys_of(&base), "search --param beta")?),
        SearchParam::UniformLambda => None,
    };
    // Consensus without a fixed threshold also sweeps the threshold.
    let methods = match (args.method, args.prune_threshold) {
        (MethodArg::Consensus, None) => vec![
            MergeMethod::Consensus(args.consensus(Some(1))),
            MergeMethod::Consensus(args.consensus(Some(2))),
        ],
        _ => vec![first],
    };

    #[derive(Serialize)]
    struct Run {
        method: MergeMethod,
        param: &'static str,
        #[serde(skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
        outcome: SearchOutcome,
    }
    let mut runs = Vec::new();
    let mut best_model = None;
    for method in methods {
        let merged = method.merge(&tvs)?;
        let (outcome, alpha, model) = match &depths {
            Some(depths) => {
                let alpha = scaling::alpha_heuristic(&tvs, &merged)?;
                let build = |beta: f64| {
                    let s = scaling::scale(&merged, depths, &ScalingSchedule::new(alpha, beta, shape))?;
                    task_vector::apply(&base, &s, 1.0)
                };
                let outcome = grid_search(build, &grid, evaluator.as_ref(), jobs)?;
                let model = build(outcome.best_coeff)?;
                (outcome, Some(alpha), model)
            }
            None => {
                let build = |lambda: f64| task_vector::apply(&base, &merged, lambda);
                let outcome = grid_search(build, &grid, evaluator.as_ref(), jobs)?;
                let model = build(outcome.best_coeff)?;
                (outcome, None, model)
            }
        };
        let better = runs
            .iter()
            .all(|r: &Run| outcome.best.metric > r.outcome.best.metric);
        if better {
            best_model = Some(model);
        }
        runs.push(Run {
            method,
            param: match param {
                SearchParam::Beta => "beta",
                SearchParam::UniformLambda => "uniform_lambda",
            },
            alpha,
            outcome,
        });
    }
    if let (Some(path), Some(model)) = (out, &best_model) {
        save(model, path, DtypeArg::F32)?;
    }
    let best = runs
        .iter()
        .fold(None::<&Run>, |b, r| match b {
            Some(b) if r.outcome.best.metric <= b.outcome.best.metric => Some(b),
            _ => Some(r),
        })
        .expect("at least one run");
    #[derive(Serialize)]
    struct Report<'a> {
        best_method: &'a MergeMethod,
        best_coeff: f64,
        best_metric: f64,
        runs: &'a [Run],
    }
    let report = Report {
        best_method: &best.method,
        best_coeff: best.outcome.best_coeff,
        best_metric: best.outcome.best.metric,
        runs: &runs,
    };
    emit(format, &report, || {
        let mut s = String::new();
        for r in &runs {
            let _ = writeln!(s, "{} {:?}", r.param, r.method);
            for p in &r.outcome.trace {
                let _ = writeln!(s, "  {:>8.4}  {:.6}", p.coeff, p.result.metric);
            }
        }
        let _ = writeln!(s, "best {} = {} (metric {})", best.param, report.best_coeff, report.best_metric);
        s
    })
}

fn experiment_config(path: Option<&Path>, jobs: Option<usize>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn write_report<T: Serialize>(path: Option<&Path>, report: &T) -> Result<()> {
    if let Some(path) = path {
        let mut text = serde_json::to_string_pretty(report)?;
        text.push('\n');
        tensor_store::write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

fn cmd_toy(format: Format, jobs: Option<usize>, toy: Toy) -> Result<()> {
    match toy {
        Toy::Forgetting { config, report } => {
            let cfg = experiment_config(config.as_deref(), jobs)?;
            let r = experiment::forgetting_experiment(&cfg)?;
            write_report(report.as_deref(), &r)?;
            emit(format, &r, || r.to_text())
        }
        Toy::Merging { config, report } => {
            let cfg = experiment_config(config.as_deref(), jobs)?;
            let r = experiment::merging_experiment(&cfg)?;
            write_report(report.as_deref(), &r)?;
            emit(format, &r, || r.to_text())
        }
        Toy::Fixture { config, seed, out } => {
            let cfg = experiment_config(config.as_deref(), jobs)?;
            let model = toy::fixture_model(&cfg, seed)?;
            save(&model, &out, DtypeArg::F32)?;
            println!("{}", model.content_hash());
            Ok(())
        }
        Toy::Eval {
            config,
            checkpoint,
            split,
        } => {
            let result = ToyEvaluator::from_config_file(&config, split.into())?.evaluate(&load(&checkpoint)?)?;
            println!("{}", serde_json::to_string(&result)?);
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct TensorSummary {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    norm: f64,
}

#[derive(Serialize)]
struct DepthNorms {
    blocks: Vec<f64>,
    out_of_block: f64,
    excluded: f64,
}

#[derive(Serialize)]
struct Inspection {
    tensors: usize,
    parameters: usize,
    content_hash: String,
    norm: f64,
    metadata: std::collections::BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    depth_norms: Option<DepthNorms>,
    entries: Vec<TensorSummary>,
}

fn cmd_inspect(format: Format, path: &Path, topology: &TopologyArgs) -> Result<()> {
    let map = load(path)?;
    let depths = topology.depths_for(keys_of(&map))?;
    let mut entries = Vec::with_capacity(map.len());
    let mut total = 0.0;
    let mut blocks = vec![0.0; depths.as_ref().map_or(0, |d| d.num_blocks())];
    let (mut outside, mut excluded) = (0.0, 0.0);
    for (name, t) in map.iter() {
        let sq = task_vector::squared_norm(t);
        total += sq;
        if let Some(depths) = &depths {
            match depths.get(name).expect("depth map covers every key") {
                Assignment::Block(d) => blocks[d] += sq,
                Assignment::OutOfBlock => outside += sq,
                Assignment::Excluded => excluded += sq,
            }
        }
        entries.push(TensorSummary {
            name: name.to_string(),
            dtype: map.original_dtype(name).unwrap_or(t.dtype()).tag().to_string(),
            shape: t.shape().to_vec(),
            norm: sq.sqrt(),
        });
    }
    let report = Inspection {
        tensors: map.len(),
        parameters: map.numel(),
        content_hash: map.content_hash(),
        norm: total.sqrt(),
        metadata: map.metadata().clone(),
        depth_norms: depths.map(|_| DepthNorms {
            blocks: blocks.iter().map(|v| v.sqrt()).collect(),
            out_of_block: outside.sqrt(),
            excluded: excluded.sqrt(),
        }),
        entries,
    };
    emit(format, &report, || {
        let mut s = String::new();
        let _ = writeln!(s, "tensors     {}", report.tensors);
        let _ = writeln!(s, "parameters  {}", report.parameters);
        let _ = writeln!(s, "sha256      {}", report.content_hash);
        let _ = writeln!(s, "norm        {:.6e}", report.norm);
        for (k, v) in &report.metadata {
            let _ = writeln!(s, "meta        {k} = {v}");
        }
        if let Some(d) = &report.depth_norms {
            for (i, n) in d.blocks.iter().enumerate() {
                let _ = writeln!(s, "block {i:<5} {n:.6e}");
            }
            let _ = writeln!(s, "outside     {:.6e}", d.out_of_block);
            let _ = writeln!(s, "excluded    {:.6e}", d.excluded);
        }
        for e in &report.entries {
            let _ = writeln!(s, "  {:<40} {:<5} {:?} {:.6e}", e.name, e.dtype, e.shape, e.norm);
        }
        s
    })
}
