use std::collections::BTreeMap;

use super::TtsError;
use crate::baselines::{single_generation_scores, Method, ScoreKey, StepScore};
use crate::features::{extract_rows, FeatureConfig};
use crate::numerics::Tensor;
use crate::taskgen::{oracle_judge, Problem, StepTrace};
use crate::toylm::InternalTrace;
use crate::uhead::UHead;

/// One chain as seen by a scorer. Spans index `tokens`.
#[derive(Debug, Clone, Copy)]
pub struct ChainView<'a> {
    pub problem: &'a Problem,
    pub chain_index: usize,
    pub tokens: &'a [usize],
    pub prompt_len: usize,
    pub trace: &'a InternalTrace,
    pub parsed: &'a StepTrace,
}

impl ChainView<'_> {
    fn step_at(&self, span: (usize, usize)) -> Option<usize> {
        self.parsed.steps.iter().position(|s| s.span == span)
    }
}

/// Step uncertainty `U`; step quality is `1 - U`.
pub trait Scorer {
    fn name(&self) -> String;

    /// Uncertainty of the line occupying `span`.
    fn span_uncertainty(&self, view: &ChainView, span: (usize, usize)) -> Result<f64, TtsError>;

    /// Uncertainty of every parsed step, in order.
    fn step_uncertainties(&self, view: &ChainView) -> Result<Vec<f64>, TtsError> {
        view.parsed
            .steps
            .iter()
            .map(|s| self.span_uncertainty(view, s.span))
            .collect()
    }
}

pub struct UHeadScorer<'a> {
    pub head: &'a UHead,
    pub features: &'a FeatureConfig,
}

impl Scorer for UHeadScorer<'_> {
    fn name(&self) -> String {
        Method::Uhead.name().to_string()
    }

    fn span_uncertainty(&self, view: &ChainView, span: (usize, usize)) -> Result<f64, TtsError> {
        let x = extract_rows(view.trace, span, self.features)?;
        Ok(self.head.score_step(&x)?)
    }

    fn step_uncertainties(&self, view: &ChainView) -> Result<Vec<f64>, TtsError> {
        let xs = view
            .parsed
            .steps
            .iter()
            .map(|s| extract_rows(view.trace, s.span, self.features))
            .collect::<Result<Vec<Tensor>, _>>()?;
        let refs: Vec<&Tensor> = xs.iter().collect();
        Ok(self.head.score_steps(&refs)?)
    }
}

/// One of the single-generation scores computed from the chain's trace.
pub struct BaselineScorer {
    pub method: Method,
    pub vocab_size: usize,
}

impl BaselineScorer {
    pub fn new(method: Method, vocab_size: usize) -> Result<Self, TtsError> {
        if !Method::SINGLE_GENERATION.contains(&method) {
            return Err(TtsError::BadArgument(format!(
                "{method} is not a single-generation score"
            )));
        }
        Ok(Self { method, vocab_size })
    }
}

impl Scorer for BaselineScorer {
    fn name(&self) -> String {
        self.method.name().to_string()
    }

    fn span_uncertainty(&self, view: &ChainView, span: (usize, usize)) -> Result<f64, TtsError> {
        let scores = single_generation_scores(view.trace, span, self.vocab_size)?;
        Ok(scores
            .iter()
            .find(|(m, _)| *m == self.method)
            .map(|&(_, v)| v)
            .expect("constructor checks the method"))
    }
}

/// Exact step labels from the ground truth: `U = 0` for a correct step.
/// A line that is not a step is scored by the final answer.
pub struct OracleStepScorer;

fn answer_uncertainty(view: &ChainView) -> f64 {
    if view.parsed.answer.as_deref() == Some(view.problem.answer.as_str()) {
        0.0
    } else {
        1.0
    }
}

impl Scorer for OracleStepScorer {
    fn name(&self) -> String {
        "oracle-step".into()
    }

    fn span_uncertainty(&self, view: &ChainView, span: (usize, usize)) -> Result<f64, TtsError> {
        match view.step_at(span) {
            Some(i) => {
                let labels = oracle_judge(view.problem, view.parsed)?;
                Ok(if labels.correct[i] { 0.0 } else { 1.0 })
            }
            None => Ok(answer_uncertainty(view)),
        }
    }

    fn step_uncertainties(&self, view: &ChainView) -> Result<Vec<f64>, TtsError> {
        let labels = oracle_judge(view.problem, view.parsed)?;
        Ok(labels
            .correct
            .iter()
            .map(|&c| if c { 0.0 } else { 1.0 })
            .collect())
    }
}

/// Every step inherits the final answer's correctness, so a chain's
/// quality is 1 exactly when its answer is right.
pub struct OracleAnswerScorer;

impl Scorer for OracleAnswerScorer {
    fn name(&self) -> String {
        "oracle-answer".into()
    }

    fn span_uncertainty(&self, view: &ChainView, _span: (usize, usize)) -> Result<f64, TtsError> {
        Ok(answer_uncertainty(view))
    }
}

/// Replays recorded scores of one method.
pub struct TableScorer<'a> {
    pub table: &'a BTreeMap<ScoreKey, StepScore>,
    pub method: Method,
}

impl Scorer for TableScorer<'_> {
    fn name(&self) -> String {
        self.method.name().to_string()
    }

    fn span_uncertainty(&self, view: &ChainView, span: (usize, usize)) -> Result<f64, TtsError> {
        let missing = || {
            TtsError::MissingScore(format!(
                "{}/{} span {:?} ({})",
                view.problem.id, view.chain_index, span, self.method
            ))
        };
        let step = view.step_at(span).ok_or_else(missing)?;
        let key = (view.problem.id.clone(), view.chain_index, step, self.method);
        self.table.get(&key).map(|s| s.value).ok_or_else(missing)
    }
}
