use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::LabelRecord;
use super::{chain, schedule, Problem, ProblemSpec, StepTrace, TaskError};

/// Judge accuracy used when none is configured.
pub const DEFAULT_JUDGE_ACCURACY: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum JudgeId {
    Oracle,
    Noisy { accuracy: f64, seed: u64 },
    External { source: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLabels {
    /// One entry per step; `true` means the step is correct.
    pub correct: Vec<bool>,
    pub final_correct: bool,
    pub judge: JudgeId,
}

impl StepLabels {
    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }
}

/// Exact step verification against each step's stated premises and the
/// problem, plus an independent final-answer check.
pub fn oracle_judge(problem: &Problem, trace: &StepTrace) -> Result<StepLabels, TaskError> {
    if trace.steps.is_empty() {
        return Err(TaskError::EmptyTrace);
    }
    let bodies: Vec<Vec<&str>> = trace.steps.iter().map(|s| s.body_words()).collect();
    let correct = match &problem.spec {
        ProblemSpec::ChainArith { .. } => chain::judge_steps(&problem.spec, &bodies),
        ProblemSpec::Schedule { .. } => schedule::judge_steps(&problem.spec, &bodies),
    };
    Ok(StepLabels {
        correct,
        final_correct: trace.answer.as_deref() == Some(problem.answer.as_str()),
        judge: JudgeId::Oracle,
    })
}

/// Flips every bit (steps and final) independently with probability `1 - a`.
pub fn noisy_judge(labels: &StepLabels, accuracy: f64, seed: u64) -> Result<StepLabels, TaskError> {
    if !(accuracy > 0.0 && accuracy <= 1.0) {
        return Err(TaskError::BadAccuracy(accuracy));
    }
    if labels.is_empty() {
        return Err(TaskError::EmptyTrace);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flip = |b: bool| b ^ (rng.gen::<f64>() >= accuracy);
    Ok(StepLabels {
        correct: labels.correct.iter().map(|&b| flip(b)).collect(),
        final_correct: flip(labels.final_correct),
        judge: JudgeId::Noisy { accuracy, seed },
    })
}

/// Labels for one chain taken from externally supplied records.
pub fn external_judge(
    records: &[LabelRecord],
    source: &str,
    problem_id: &str,
    chain_index: usize,
    n_steps: usize,
) -> Result<StepLabels, TaskError> {
    let r = records
        .iter()
        .find(|r| r.problem_id == problem_id && r.chain_index == chain_index)
        .ok_or_else(|| {
            TaskError::LabelFile(format!("no labels for {problem_id} chain {chain_index}"))
        })?;
    if r.steps.len() != n_steps {
        return Err(TaskError::LabelFile(format!(
            "{problem_id} chain {chain_index}: {} labels for {n_steps} steps",
            r.steps.len()
        )));
    }
    if r.steps.iter().any(|&b| b > 1) {
        return Err(TaskError::LabelFile(format!(
            "{problem_id} chain {chain_index}: labels must be 0 or 1"
        )));
    }
    Ok(StepLabels {
        correct: r.steps.iter().map(|&b| b == 1).collect(),
        final_correct: r.final_correct,
        judge: JudgeId::External {
            source: source.to_string(),
        },
    })
}
