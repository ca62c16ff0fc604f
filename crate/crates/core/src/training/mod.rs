//! Set-prediction training: bipartite matching between decoder queries and
//! ground truth, multi-task loss, and the optimizer loop.

mod hungarian;
mod loss;
mod optim;

pub use hungarian::{hungarian_match, MatchAssignment};
pub use loss::{
    match_cost, match_predictions, prepare_example, prepare_truth, spotting_loss, LossBreakdown,
    LossTerms, TrainExample, TruthInstance,
};
pub use optim::{collect_grads, fit, fit_mae, trace_to_csv, Adam, TraceRow, TrainConfig};

use thiserror::Error;

use crate::geometry::GeometryError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
}
