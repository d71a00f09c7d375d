//! Depth-dependent scaling of fine-tuning residuals and the model-merging
//! algorithms it composes with.

pub mod error;
pub mod merge;
pub mod scaling;
pub mod search;
pub mod task_vector;
pub mod tensor_store;
pub mod topology;
pub mod toy;

pub use error::{Error, Result};
pub use merge::{ConsensusConfig, MergeMethod, MergedModel, TiesConfig};
pub use scaling::{ScalingSchedule, Shape, TradeoffCandidate};
pub use search::{EvalResult, Evaluator, EvaluatorSpec, Grid, Split};
pub use task_vector::TaskVector;
pub use tensor_store::{CompatibilityReport, Dtype, DtypePolicy, LoadOptions, NamedTensorMap, Tensor};
pub use topology::{Assignment, DepthMap, OutOfBlockPolicy, TopologyConfig};
