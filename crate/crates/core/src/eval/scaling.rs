use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{pr_auc, EvalError};
use crate::features::StepFeatures;
use crate::numerics::Tensor;
use crate::uhead::{train_uhead, UHead, UHeadConfig, UHeadTrainHyper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingMode {
    AddQuestions,
    AddTrajectories,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPoint {
    pub mode: ScalingMode,
    pub problems: usize,
    pub trajectories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub mode: ScalingMode,
    pub problems: usize,
    pub trajectories: usize,
    pub train_steps: usize,
    pub pr_auc: f64,
}

/// Problem ids in order of first appearance.
pub fn problem_order(steps: &[StepFeatures]) -> Vec<String> {
    let mut seen = HashSet::new();
    steps
        .iter()
        .filter(|s| seen.insert(s.problem_id.as_str()))
        .map(|s| s.problem_id.clone())
        .collect()
}

/// Steps of the listed problems whose chain index is below `trajectories`.
pub fn select_steps(
    steps: &[StepFeatures],
    incorrect: &[bool],
    problems: &[String],
    trajectories: usize,
) -> (Vec<StepFeatures>, Vec<bool>) {
    let keep: HashSet<&str> = problems.iter().map(String::as_str).collect();
    steps
        .iter()
        .zip(incorrect)
        .filter(|(s, _)| keep.contains(s.problem_id.as_str()) && s.chain_index < trajectories)
        .map(|(s, &y)| (s.clone(), y))
        .unzip()
}

/// Average precision of a head's uncertainty on labelled steps.
pub fn head_pr_auc(
    head: &UHead,
    steps: &[StepFeatures],
    incorrect: &[bool],
) -> Result<f64, EvalError> {
    let refs: Vec<&Tensor> = steps.iter().map(|s| &s.data).collect();
    let u = head.score_steps(&refs)?;
    pr_auc(incorrect, &u)
}

/// Trains one head per grid point on the first `problems` training
/// problems with `trajectories` chains each and scores it on `test`.
pub fn scaling_curves(
    train: (&[StepFeatures], &[bool]),
    test: (&[StepFeatures], &[bool]),
    grid: &[GridPoint],
    config: &UHeadConfig,
    hyper: &UHeadTrainHyper,
) -> Result<Vec<ScalingPoint>, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::Empty);
    }
    let order = problem_order(train.0);
    let mut out = Vec::with_capacity(grid.len());
    for g in grid {
        if g.problems > order.len() {
            return Err(EvalError::KTooLarge {
                k: g.problems,
                n: order.len(),
            });
        }
        let (steps, labels) = select_steps(train.0, train.1, &order[..g.problems], g.trajectories);
        let ck = train_uhead(&steps, &labels, config, hyper)?;
        out.push(ScalingPoint {
            mode: g.mode,
            problems: g.problems,
            trajectories: g.trajectories,
            train_steps: steps.len(),
            pr_auc: head_pr_auc(&ck.head, test.0, test.1)?,
        });
    }
    Ok(out)
}
