//! Toy residual MLPs on synthetic tasks: data, training, experiments.

pub mod data;
pub mod experiment;
pub mod mlp;

use std::collections::BTreeMap;
use std::path::Path;

pub use data::{generate_task, Dataset, SplitData, SplitSizes, SyntheticTaskSpec};
pub use experiment::{
    fixture_model, forgetting_experiment, merging_experiment, ExperimentConfig, ForgettingReport,
    MergingReport,
};
pub use mlp::{evaluate_model, train_model, Init, ToyMlp, ToyMlpSpec, TrainConfig};

use crate::error::{Error, Result};
use crate::search::{EvalResult, Evaluator, Split};
use crate::tensor_store::NamedTensorMap;

/// Scores a model by its mean accuracy over the tasks of one seed.
#[derive(Clone, Debug)]
pub struct ToyEvaluator {
    datasets: Vec<Dataset>,
    split: Split,
}

impl ToyEvaluator {
    pub fn new(datasets: Vec<Dataset>, split: Split) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Empty("toy evaluator tasks"));
        }
        Ok(ToyEvaluator { datasets, split })
    }

    /// Tasks of the first seed listed in an experiment config file.
    pub fn from_config_file(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let cfg = ExperimentConfig::load(path)?;
        Self::new(cfg.datasets(cfg.seeds[0]), split)
    }
}

impl Evaluator for ToyEvaluator {
    fn evaluate(&self, model: &NamedTensorMap) -> Result<EvalResult> {
        let mut per_task = BTreeMap::new();
        let mut total = 0.0;
        for (t, d) in self.datasets.iter().enumerate() {
            let acc = evaluate_model(model, d, self.split)?;
            per_task.insert(format!("task{t}"), acc);
            total += acc;
        }
        Ok(EvalResult {
            metric: total / self.datasets.len() as f64,
            per_task: Some(per_task),
        })
    }
}
