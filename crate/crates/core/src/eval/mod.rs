//! Metrics and analyses: average precision for incorrect-step detection,
//! judge agreement, the two-score combiner, diversity subsets and scaling
//! curves.

mod combiner;
mod diversity;
mod metrics;
mod report;
mod scaling;

pub use combiner::{fit_combiner, problem_subset, CombinerModel, COMBINER_SUBSET};
pub use diversity::{diversity_subset, min_pairwise_distance, question_embedding, SubsetMode};
pub use metrics::{judge_agreement, pr_auc, prevalence};
pub use report::{MetricEntry, MetricReport};
pub use scaling::{
    head_pr_auc, problem_order, scaling_curves, select_steps, GridPoint, ScalingMode,
    ScalingPoint,
};

use thiserror::Error;

use crate::uhead::UHeadError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels must contain both classes")]
    DegenerateLabels,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite score")]
    NonFinite,
    #[error("empty input")]
    Empty,
    #[error("k = {k} exceeds the {n} available points")]
    KTooLarge { k: usize, n: usize },
    #[error(transparent)]
    UHead(#[from] UHeadError),
}
