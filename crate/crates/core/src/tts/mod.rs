//! Test-time scaling: chain pools, offline and online best-of-N selection,
//! majority voting and pass@N accounting.

mod bon;
mod scorer;

pub use bon::{
    offline_bon, online_bon, sample_pool, select_offline, BoNResult, ChainOutcome, OnlineConfig,
    SampledChain, DEFAULT_MAX_STEPS,
};
pub use scorer::{
    BaselineScorer, ChainView, OracleAnswerScorer, OracleStepScorer, Scorer, TableScorer,
    UHeadScorer,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::BaselineError;
use crate::features::FeatureError;
use crate::taskgen::{Family, TaskError};
use crate::toylm::LmError;
use crate::uhead::UHeadError;

#[derive(Debug, Error)]
pub enum TtsError {
    #[error("chain has no steps")]
    EmptyChain,
    #[error("empty pool")]
    EmptyPool,
    #[error("invalid argument: {0}")]
    BadArgument(String),
    #[error("no recorded score for {0}")]
    MissingScore(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    UHead(#[from] UHeadError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

/// Default pool sizes per family for offline selection.
pub fn default_pool_size(family: Family) -> usize {
    match family {
        Family::ChainArith => 10,
        Family::Schedule => 5,
    }
}

pub const ONLINE_POOL_SIZE: usize = 5;
pub const ONLINE_TEMPERATURE: f32 = 1.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Min,
    Mean,
    Last,
}

/// Chain quality from step uncertainties: `min`, `mean` or `last` of `1 - U`.
pub fn aggregate_chain(uncertainties: &[f64], mode: Aggregation) -> Result<f64, TtsError> {
    let Some(&last) = uncertainties.last() else {
        return Err(TtsError::EmptyChain);
    };
    let q = uncertainties.iter().map(|u| 1.0 - u);
    Ok(match mode {
        Aggregation::Min => q.fold(f64::INFINITY, f64::min),
        Aggregation::Mean => q.sum::<f64>() / uncertainties.len() as f64,
        Aggregation::Last => 1.0 - last,
    })
}

/// Index of the largest value; NaN never wins and the lowest index wins ties.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best.or(if values.is_empty() { None } else { Some(0) })
}

/// Most frequent answer after trimming; ties go to the first seen.
pub fn majority_vote<S: AsRef<str>>(answers: &[S]) -> Result<String, TtsError> {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for a in answers {
        let a = a.as_ref().trim();
        match counts.iter_mut().find(|(s, _)| *s == a) {
            Some((_, c)) => *c += 1,
            None => counts.push((a, 1)),
        }
    }
    let mut best: Option<(&str, usize)> = None;
    for &(s, c) in &counts {
        if best.map_or(true, |(_, b)| c > b) {
            best = Some((s, c));
        }
    }
    best.map(|(s, _)| s.to_string()).ok_or(TtsError::EmptyPool)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassAt {
    pub pass_1: f64,
    pub pass_n: f64,
}

/// `pools[i][j]` is whether chain `j` of problem `i` answers correctly.
pub fn pass_at(pools: &[Vec<bool>]) -> Result<PassAt, TtsError> {
    if pools.is_empty() || pools.iter().any(|p| p.is_empty()) {
        return Err(TtsError::EmptyPool);
    }
    let n = pools.len() as f64;
    Ok(PassAt {
        pass_1: pools.iter().filter(|p| p[0]).count() as f64 / n,
        pass_n: pools.iter().filter(|p| p.iter().any(|&c| c)).count() as f64 / n,
    })
}
