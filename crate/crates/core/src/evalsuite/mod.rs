//! Metrics and the experiment harness.
//!
//! [`evaluate`] scores one split of a corpus into an [`EvalReport`].
//! [`ablation_sweep`] trains every requested variant under several seeds and
//! compares each against the full model with [`mcnemar`]. [`cross_domain`]
//! trains on one corpus and tests on another.

mod harness;
mod metrics;
mod report;
mod significance;

use thiserror::Error;

use crate::dataio::DataError;
use crate::model::ModelError;
use crate::trainer::TrainError;

pub use harness::{
    ablation_sweep, cross_domain, eer_bar_chart, reports_to_csv, Comparison, MeanStd, RunResult, SweepConfig,
    SweepReport, TransferConfig, VariantSummary, CSV_HEADER,
};
pub use metrics::{accuracy, compute_eer, decision_from_score, Eer, ScoredPrediction};
pub use report::{build_report, evaluate, EvalReport, GroupMetrics, REPORT_VERSION};
pub use significance::{mcnemar, mcnemar_counts, McNemar, EXACT_LIMIT};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
}

pub type Result<T> = std::result::Result<T, EvalError>;
