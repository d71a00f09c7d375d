//! Grid search over a scalar merge coefficient against a pluggable evaluator.
//!
//! Evaluators are either in-process (the toy harness) or an external command
//! speaking a small protocol: it is run as
//! `<command> --checkpoint <path> --split <val|test>` and must print exactly
//! one JSON object `{"metric": <number>, "per_task": {<name>: <number>, ...}}`
//! (the `per_task` field is optional) and exit with status 0.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{self, DtypePolicy, LoadOptions, NamedTensorMap};
use crate::toy;

/// Environment variable overriding where temporary checkpoints are written.
pub const TMPDIR_ENV: &str = "LINES_TMPDIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_task: Option<BTreeMap<String, f64>>,
}

impl EvalResult {
    pub fn new(metric: f64) -> Self {
        EvalResult {
            metric,
            per_task: None,
        }
    }
}

/// Scores a checkpoint. Implementations must be safe to call from several threads.
pub trait Evaluator: Sync {
    fn evaluate(&self, model: &NamedTensorMap) -> Result<EvalResult>;
}

impl<F> Evaluator for F
where
    F: Fn(&NamedTensorMap) -> Result<EvalResult> + Sync,
{
    fn evaluate(&self, model: &NamedTensorMap) -> Result<EvalResult> {
        self(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!(
                "unknown split {other:?} (expected val or test)"
            ))),
        }
    }
}

/// Non-empty, strictly increasing list of coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Grid(Vec<f64>);

impl Grid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("grid is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("grid values must be finite".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "grid must be strictly increasing: {values:?}"
            )));
        }
        Ok(Grid(values))
    }

    /// `start, start+step, ...` up to and including `stop`, snapped to 12 decimals.
    pub fn range(start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || stop < start {
            return Err(Error::InvalidConfig(format!(
                "bad grid range {start}:{stop}:{step}"
            )));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        Self::new(
            (0..n)
                .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Uniform-lambda and beta grid for Task Arithmetic and Consensus: 0.1..=1.0.
    pub fn unit() -> Self {
        Self::range(0.1, 1.0, 0.1).unwrap()
    }

    /// Ties-Merging grid: 0.1..=1.5.
    pub fn ties() -> Self {
        Self::range(0.1, 1.5, 0.1).unwrap()
    }

    /// Soup residual scaling for the Task Arithmetic enhancement: 1.0..=2.0.
    pub fn soup_lambda() -> Self {
        Self::range(1.0, 2.0, 0.1).unwrap()
    }

    /// Soup slope for depth scaling: 0.0..=1.0.
    pub fn soup_beta() -> Self {
        Self::range(0.0, 1.0, 0.1).unwrap()
    }
}

impl TryFrom<Vec<f64>> for Grid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Grid::new(v)
    }
}

impl From<Grid> for Vec<f64> {
    fn from(g: Grid) -> Self {
        g.0
    }
}

impl FromStr for Grid {
    type Err = Error;

    /// `start:stop:step` or a comma-separated list.
    fn from_str(s: &str) -> Result<Self> {
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad number {t:?} in grid {s:?}")))
        };
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [start, stop, step] => Grid::range(num(start)?, num(stop)?, num(step)?),
            [_] => Grid::new(s.split(',').map(num).collect::<Result<_>>()?),
            _ => Err(Error::InvalidConfig(format!(
                "grid {s:?} must be start:stop:step or a comma list"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub coeff: f64,
    pub result: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best_coeff: f64,
    pub best: EvalResult,
    pub trace: Vec<TracePoint>,
}

/// Evaluate `builder(c)` for every grid point; the best metric wins, ties
/// go to the smaller coefficient. Up to `jobs` points run concurrently.
pub fn grid_search<B>(builder: B, grid: &Grid, evaluator: &dyn Evaluator, jobs: usize) -> Result<SearchOutcome>
where
    B: Fn(f64) -> Result<NamedTensorMap> + Sync,
{
    let run = |coeff: f64| -> Result<EvalResult> {
        let wrap = |e: Error| Error::EvaluatorFailed {
            context: format!("coefficient {coeff}"),
            source: Box::new(e),
        };
        let model = builder(coeff).map_err(wrap)?;
        let result = evaluator.evaluate(&model).map_err(wrap)?;
        if !result.metric.is_finite() {
            return Err(wrap(Error::InvalidConfig(format!(
                "non-finite metric {}",
                result.metric
            ))));
        }
        Ok(result)
    };

    let results: Vec<Result<EvalResult>> = if jobs <= 1 {
        grid.values().iter().map(|&c| run(c)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| grid.values().par_iter().map(|&c| run(c)).collect())
    };

    let mut trace = Vec::with_capacity(grid.len());
    for (&coeff, r) in grid.values().iter().zip(results) {
        trace.push(TracePoint { coeff, result: r? });
    }
    let best = trace
        .iter()
        .fold(None::<&TracePoint>, |best, p| match best {
            Some(b) if p.result.metric <= b.result.metric => Some(b),
            _ => Some(p),
        })
        .expect("grid is non-empty");
    Ok(SearchOutcome {
        best_coeff: best.coeff,
        best: best.result.clone(),
        trace,
    })
}

/// Where an evaluator comes from: `toy:<config.json>` or `cmd:<command>`.
#[derive(Clone, Debug, PartialEq)]
pub enum EvaluatorSpec {
    Toy(PathBuf),
    Command(String),
}

impl FromStr for EvaluatorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("toy:") {
            Ok(EvaluatorSpec::Toy(PathBuf::from(rest)))
        } else if let Some(rest) = s.strip_prefix("cmd:") {
            if rest.trim().is_empty() {
                return Err(Error::InvalidConfig("empty evaluator command".into()));
            }
            Ok(EvaluatorSpec::Command(rest.to_string()))
        } else {
            Err(Error::InvalidConfig(format!(
                "evaluator {s:?} must start with toy: or cmd:"
            )))
        }
    }
}

impl EvaluatorSpec {
    /// An evaluator scoring in-memory models on `split`.
    pub fn build(&self, split: Split) -> Result<Box<dyn Evaluator>> {
        Ok(match self {
            EvaluatorSpec::Toy(path) => Box::new(toy::ToyEvaluator::from_config_file(path, split)?),
            EvaluatorSpec::Command(cmd) => Box::new(CommandEvaluator::new(cmd.clone(), split)),
        })
    }
}

/// Score the checkpoint at `checkpoint` on `split`.
pub fn run_evaluator(spec: &EvaluatorSpec, checkpoint: &Path, split: Split) -> Result<EvalResult> {
    match spec {
        EvaluatorSpec::Command(cmd) => run_command(cmd, checkpoint, split),
        EvaluatorSpec::Toy(config) => {
            let model = tensor_store::read_checkpoint(checkpoint, LoadOptions::default())?;
            toy::ToyEvaluator::from_config_file(config, split)?.evaluate(&model)
        }
    }
}

fn run_command(cmd: &str, checkpoint: &Path, split: Split) -> Result<EvalResult> {
    // The command text goes through the shell; the protocol arguments are
    // passed positionally so paths never need quoting.
    let output = Command::new("sh")
        .arg("-c")
        .arg(format!("{cmd} \"$@\""))
        .arg("sh")
        .arg("--checkpoint")
        .arg(checkpoint)
        .arg("--split")
        .arg(split.to_string())
        .output()
        .map_err(|e| Error::io(PathBuf::from("sh"), e))?;
    let stdout = String::from_utf8_lossy(&output.stdout).into_owned();
    if !output.status.success() {
        return Err(Error::EvaluatorExit {
            status: output.status.to_string(),
            stdout,
            stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
        });
    }
    parse_protocol(&stdout)
}

/// Parse evaluator standard output: exactly one JSON object with a numeric `metric`.
pub fn parse_protocol(stdout: &str) -> Result<EvalResult> {
    let malformed = |reason: String| Error::EvaluatorMalformed {
        reason,
        stdout: stdout.to_string(),
    };
    let mut values = serde_json::Deserializer::from_str(stdout).into_iter::<serde_json::Value>();
    let value = match values.next() {
        None => return Err(malformed("no output".into())),
        Some(Err(e)) => return Err(malformed(e.to_string())),
        Some(Ok(v)) => v,
    };
    if values.next().is_some() {
        return Err(malformed("more than one JSON value".into()));
    }
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("top-level value is not an object".into()))?;
    let metric = obj
        .get("metric")
        .and_then(|m| m.as_f64())
        .ok_or_else(|| Error::EvaluatorMissingMetric {
            stdout: stdout.to_string(),
        })?;
    let per_task = match obj.get("per_task") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value::<BTreeMap<String, f64>>(v.clone())
                .map_err(|e| malformed(format!("per_task: {e}")))?,
        ),
    };
    Ok(EvalResult { metric, per_task })
}

/// Writes each model to a temporary checkpoint and runs an external command on it.
#[derive(Clone, Debug)]
pub struct CommandEvaluator {
    command: String,
    split: Split,
}

impl CommandEvaluator {
    pub fn new(command: String, split: Split) -> Self {
        CommandEvaluator { command, split }
    }
}

/// Temp directory honoring `LINES_TMPDIR`.
pub fn temp_dir() -> PathBuf {
    std::env::var_os(TMPDIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir)
}

impl Evaluator for CommandEvaluator {
    fn evaluate(&self, model: &NamedTensorMap) -> Result<EvalResult> {
        let dir = temp_dir();
        let file = tempfile::Builder::new()
            .prefix("lines-eval-")
            .suffix(".safetensors")
            .tempfile_in(&dir)
            .map_err(|e| Error::io(&dir, e))?;
        let bytes = tensor_store::to_bytes(model, DtypePolicy::ForceF32)?;
        std::fs::write(file.path(), bytes).map_err(|e| Error::io(file.path(), e))?;
        run_command(&self.command, file.path(), self.split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::Tensor;

    fn coeff_model(c: f64) -> Result<NamedTensorMap> {
        Ok(NamedTensorMap::new().with("c", Tensor::vector(vec![c as f32])))
    }

    fn table(pairs: &'static [(f32, f64)]) -> impl Fn(&NamedTensorMap) -> Result<EvalResult> + Sync {
        move |m: &NamedTensorMap| {
            let c = m.get("c").unwrap().data()[0];
            pairs
                .iter()
                .find(|(k, _)| *k == c)
                .map(|(_, v)| EvalResult::new(*v))
                .ok_or_else(|| Error::InvalidConfig(format!("no entry for {c}")))
        }
    }

    #[test]
    fn picks_argmax() {
        let grid = Grid::new(vec![0.1, 0.2, 0.3]).unwrap();
        let eval = table(&[(0.1, 0.5), (0.2, 0.9), (0.3, 0.7)]);
        for jobs in [1, 3] {
            let out = grid_search(coeff_model, &grid, &eval, jobs).unwrap();
            assert_eq!(out.best_coeff, 0.2);
            assert_eq!(out.best.metric, 0.9);
            assert_eq!(out.trace.len(), 3);
            assert_eq!(out.trace.iter().map(|p| p.coeff).collect::<Vec<_>>(), vec![0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn constant_metric_picks_smallest() {
        let grid = Grid::unit();
        let eval = |_: &NamedTensorMap| Ok(EvalResult::new(0.5));
        let out = grid_search(coeff_model, &grid, &eval, 4).unwrap();
        assert_eq!(out.best_coeff, 0.1);
        let single = Grid::new(vec![0.7]).unwrap();
        assert_eq!(grid_search(coeff_model, &single, &eval, 1).unwrap().best_coeff, 0.7);
    }

    #[test]
    fn failure_names_coefficient() {
        let grid = Grid::new(vec![0.1, 0.2, 0.3]).unwrap();
        let eval = table(&[(0.1, 0.5), (0.3, 0.7)]);
        match grid_search(coeff_model, &grid, &eval, 2) {
            Err(Error::EvaluatorFailed { context, .. }) => assert!(context.contains("0.2")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(
            "0.1:0.5:0.1".parse::<Grid>().unwrap().values(),
            &[0.1, 0.2, 0.3, 0.4, 0.5]
        );
        assert_eq!("1,2.5,3".parse::<Grid>().unwrap().values(), &[1.0, 2.5, 3.0]);
        assert!("0.3,0.2".parse::<Grid>().is_err());
        assert!("".parse::<Grid>().is_err());
        assert!("1:0:0.1".parse::<Grid>().is_err());
        assert_eq!(Grid::unit().len(), 10);
        assert_eq!(Grid::ties().len(), 15);
        assert_eq!(Grid::ties().values()[14], 1.5);
        assert_eq!(Grid::soup_lambda().values(), &[1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0]);
        assert_eq!(Grid::soup_beta().len(), 11);
        assert_eq!(Grid::unit().values()[2], 0.3);
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!(parse_protocol(r#"{"metric": 0.5}"#).unwrap(), EvalResult::new(0.5));
        let r = parse_protocol("{\"metric\": 1, \"per_task\": {\"a\": 0.25}}\n").unwrap();
        assert_eq!(r.per_task.unwrap()["a"], 0.25);
        assert!(matches!(parse_protocol("not json"), Err(Error::EvaluatorMalformed { .. })));
        assert!(matches!(parse_protocol(""), Err(Error::EvaluatorMalformed { .. })));
        assert!(matches!(
            parse_protocol(r#"{"metric": 1} {"metric": 2}"#),
            Err(Error::EvaluatorMalformed { .. })
        ));
        assert!(matches!(parse_protocol("[1]"), Err(Error::EvaluatorMalformed { .. })));
        assert!(matches!(
            parse_protocol(r#"{"score": 1}"#),
            Err(Error::EvaluatorMissingMetric { .. })
        ));
        assert!(matches!(
            parse_protocol(r#"{"metric": "high"}"#),
            Err(Error::EvaluatorMissingMetric { .. })
        ));
    }

    #[test]
    fn evaluator_spec_parsing() {
        assert_eq!(
            "toy:cfg.json".parse::<EvaluatorSpec>().unwrap(),
            EvaluatorSpec::Toy("cfg.json".into())
        );
        assert_eq!(
            "cmd:python eval.py".parse::<EvaluatorSpec>().unwrap(),
            EvaluatorSpec::Command("python eval.py".into())
        );
        assert!("eval.py".parse::<EvaluatorSpec>().is_err());
        assert!("cmd: ".parse::<EvaluatorSpec>().is_err());
    }
}
