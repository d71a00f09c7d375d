use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lines_core::{Grid, OutOfBlockPolicy, Shape, Split};

#[derive(Parser, Debug)]
#[command(name = "lines", version, about = "Depth-scaled editing and merging of fine-tuned checkpoints")]
pub struct Cli {
    /// Output format for reports.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,

    /// Cap on worker threads (per-tensor work and grid evaluations).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    /// Keep each tensor's stored dtype.
    Preserve,
    F32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ta,
    Ties,
    Consensus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Alpha,
    One,
    Zero,
}

impl From<PolicyArg> for OutOfBlockPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Alpha => OutOfBlockPolicy::Alpha,
            PolicyArg::One => OutOfBlockPolicy::One,
            PolicyArg::Zero => OutOfBlockPolicy::Zero,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the task vector `finetuned - base`.
    Extract {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
        dtype: DtypeArg,
    },
    /// Scale a task vector block by block.
    Scale {
        #[arg(long)]
        tv: PathBuf,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[command(flatten)]
        topology: TopologyArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
        dtype: DtypeArg,
    },
    /// Merge task vectors into a base model.
    Merge {
        #[command(flatten)]
        merge: MergeArgs,
        /// Slope of the depth schedule; the intercept comes from the norm heuristic.
        #[arg(long, conflicts_with = "uniform_lambda")]
        beta: Option<f64>,
        /// Baseline merge: `base + lambda * merged`, no depth scaling.
        #[arg(long)]
        uniform_lambda: Option<f64>,
        #[arg(long, value_enum, default_value_t = ShapeArg::Linear)]
        shape: ShapeArg,
        #[command(flatten)]
        topology: TopologyArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average fine-tuned checkpoints.
    Soup {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        members: Vec<PathBuf>,
        /// Greedy selection scored by this evaluator (`toy:<config>` or `cmd:<command>`).
        #[arg(long)]
        evaluator: Option<String>,
        /// Count the base as an extra zero-residual member (uniform soup only).
        #[arg(long, conflicts_with = "evaluator")]
        include_base: bool,
        /// Require strict improvement to accept a member.
        #[arg(long, requires = "evaluator")]
        strict: bool,
        /// Depth-scale the final soup residual with intercept 1 and this slope.
        #[arg(long, requires = "evaluator")]
        lines_beta: Option<f64>,
        #[command(flatten)]
        topology: TopologyArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolate along task vectors.
    #[command(subcommand)]
    Interpolate(Interpolate),
    /// Grid-search a merge coefficient against an evaluator.
    Search {
        #[command(flatten)]
        merge: MergeArgs,
        /// Which coefficient the grid sweeps.
        #[arg(long, value_enum, default_value_t = SearchParam::Beta)]
        param: SearchParam,
        /// `start:stop:step` or a comma list; defaults to the method's standard grid.
        #[arg(long)]
        grid: Option<Grid>,
        #[arg(long)]
        evaluator: String,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = ShapeArg::Linear)]
        shape: ShapeArg,
        #[command(flatten)]
        topology: TopologyArgs,
        /// Also write the best model here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Toy models and the desk-scale experiments.
    #[command(subcommand)]
    Toy(Toy),
    /// Summarize a checkpoint: tensors, hash, and per-block norms.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        topology: TopologyArgs,
    },
}

#[derive(Subcommand, Debug)]
pub enum Interpolate {
    /// `base + gamma * tv`, optionally depth-scaling `tv` first.
    Wiseft {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        tv: PathBuf,
        #[arg(long)]
        gamma: f64,
        /// Depth-scale the task vector with this intercept before interpolating.
        #[arg(long, requires = "beta")]
        alpha: Option<f64>,
        #[arg(long, requires = "alpha")]
        beta: Option<f64>,
        #[arg(long, value_enum, default_value_t = ShapeArg::Linear)]
        shape: ShapeArg,
        #[command(flatten)]
        topology: TopologyArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// `sft + lambda * tv1 + (1 - lambda) * tv2`.
    Rewarded {
        #[arg(long)]
        sft: PathBuf,
        #[arg(long)]
        tv1: PathBuf,
        #[arg(long)]
        tv2: PathBuf,
        #[arg(long)]
        lambda: f64,
        /// Depth-scale the combined residual with intercept 1 and slope 1.
        #[arg(long)]
        lines: bool,
        #[command(flatten)]
        topology: TopologyArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum Toy {
    /// Sweep the depth schedule on fine-tuned toy models.
    Forgetting {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the full report as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare uniform Task Arithmetic with the depth-scaled merge.
    Merging {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the pre-trained toy checkpoint for one seed.
    Fixture {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the tasks of the config's first seed; prints
    /// one evaluator-protocol JSON object.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub tv: Vec<PathBuf>,
    /// Ties: fraction of entries kept per vector.
    #[arg(long)]
    pub keep: Option<f64>,
    /// Consensus: relevance multiplier.
    #[arg(long)]
    pub mask_lambda: Option<f64>,
    /// Consensus: tasks a coordinate must be relevant to (1 or 2).
    #[arg(long)]
    pub prune_threshold: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    #[arg(long, requires = "beta", conflicts_with = "gamma")]
    pub alpha: Option<f64>,
    #[arg(long, requires = "alpha", conflicts_with = "gamma")]
    pub beta: Option<f64>,
    /// Shorthand for `alpha = gamma, beta = 1 - gamma`.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum, default_value_t = ShapeArg::Linear)]
    pub shape: ShapeArg,
}

#[derive(Args, Debug, Default)]
pub struct TopologyArgs {
    /// Topology config file (JSON).
    #[arg(long, conflicts_with_all = ["block_pattern", "num_blocks"])]
    pub topology: Option<PathBuf>,
    /// Literal text around `{d}` in block parameter names, e.g. `.layer{d}.`.
    #[arg(long, requires = "num_blocks")]
    pub block_pattern: Option<String>,
    #[arg(long, requires = "block_pattern")]
    pub num_blocks: Option<usize>,
    #[arg(long, value_enum)]
    pub out_of_block: Option<PolicyArg>,
    /// Only scale keys with one of these prefixes.
    #[arg(long, num_args = 1..)]
    pub include_prefix: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ShapeArg {
    Linear,
    Sqrt,
    Quadratic,
}

impl From<ShapeArg> for Shape {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::Linear => Shape::Linear,
            ShapeArg::Sqrt => Shape::Sqrt,
            ShapeArg::Quadratic => Shape::Quadratic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SearchParam {
    /// Slope of the depth-scaled merge.
    Beta,
    /// Uniform coefficient of the baseline merge.
    UniformLambda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}
