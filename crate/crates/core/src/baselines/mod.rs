//! Unsupervised step uncertainty scores computed from the generator's own
//! trace, plus one sampling-based score.
//!
//! Orientation: every value in a [`StepScore`] is "higher = more uncertain".
//! [`self_certainty`] itself is "higher = more certain"; its table entry is
//! the negated value.

mod lexical;

pub use lexical::{jaccard, lexical_similarity_uncertainty, LexicalScore};

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;
use crate::taskgen::{read_jsonl, write_jsonl, ArtifactHeader, TaskError};
use crate::toylm::{InternalTrace, LmError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("step has no tokens")]
    EmptyStep,
    #[error("chain has no steps")]
    EmptyTrace,
    #[error("invalid argument: {0}")]
    BadArgument(String),
    #[error("span {start}..{end} not covered by the trace")]
    SpanOutOfRange { start: usize, end: usize },
    #[error("duplicate score for {0}")]
    DuplicateKey(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Table(#[from] TaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Msp,
    MeanEntropy,
    Perplexity,
    SelfCertainty,
    LexicalSimilarity,
    Random,
    Uhead,
    Combined,
}

impl Method {
    pub const SINGLE_GENERATION: [Method; 4] = [
        Method::Msp,
        Method::MeanEntropy,
        Method::Perplexity,
        Method::SelfCertainty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Msp => "msp",
            Method::MeanEntropy => "mean-entropy",
            Method::Perplexity => "perplexity",
            Method::SelfCertainty => "self-certainty",
            Method::LexicalSimilarity => "lexical-similarity",
            Method::Random => "random",
            Method::Uhead => "uhead",
            Method::Combined => "combined",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One row of the score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepScore {
    pub problem_id: String,
    pub chain_index: usize,
    pub step_index: usize,
    pub method: Method,
    /// Higher means more uncertain.
    pub value: f64,
    /// Set when the value is a fallback rather than a measurement.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

fn nonempty<T>(v: &[T]) -> Result<(), BaselineError> {
    if v.is_empty() {
        Err(BaselineError::EmptyStep)
    } else {
        Ok(())
    }
}

/// `1 - Π p` over the step's tokens.
pub fn msp_uncertainty(logprobs: &[f64]) -> Result<f64, BaselineError> {
    nonempty(logprobs)?;
    let sum: f64 = logprobs.iter().map(|&l| l.min(0.0)).sum();
    Ok(-sum.exp_m1())
}

pub fn mean_token_entropy(entropies: &[f64]) -> Result<f64, BaselineError> {
    nonempty(entropies)?;
    Ok(entropies.iter().sum::<f64>() / entropies.len() as f64)
}

/// `exp(-mean log p)`.
pub fn perplexity(logprobs: &[f64]) -> Result<f64, BaselineError> {
    nonempty(logprobs)?;
    let mean = logprobs.iter().map(|&l| l.min(0.0)).sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

/// KL(uniform ‖ p) for one predictive distribution known through its
/// top-K log-probs; the remaining mass is spread evenly over the other
/// `vocab_size - K` tokens.
pub fn kl_from_uniform(top_logprobs: &[f64], vocab_size: usize) -> Result<f64, BaselineError> {
    let k = top_logprobs.len();
    if k == 0 || k > vocab_size {
        return Err(BaselineError::BadArgument(format!(
            "need 1..={vocab_size} log-probs, got {k}"
        )));
    }
    let v = vocab_size as f64;
    let mut sum_log: f64 = top_logprobs.iter().sum();
    if k < vocab_size {
        let known: f64 = top_logprobs.iter().map(|l| l.exp()).sum();
        let tail = (1.0 - known).max(1e-12) / (vocab_size - k) as f64;
        sum_log += (vocab_size - k) as f64 * tail.ln();
    }
    Ok((-v.ln() - sum_log / v).max(0.0))
}

/// Mean per-token KL(uniform ‖ p); higher means more certain.
pub fn self_certainty(
    top_logprobs: &[Vec<f64>],
    vocab_size: usize,
) -> Result<f64, BaselineError> {
    nonempty(top_logprobs)?;
    let mut total = 0.0;
    for lp in top_logprobs {
        total += kl_from_uniform(lp, vocab_size)?;
    }
    Ok(total / top_logprobs.len() as f64)
}

/// Chain quality for the fewest-steps selector.
pub fn min_steps_score(n_steps: usize) -> Result<f64, BaselineError> {
    if n_steps == 0 {
        return Err(BaselineError::EmptyTrace);
    }
    Ok(-(n_steps as f64))
}

/// Index of the chain with the fewest steps; the lower index wins ties.
pub fn select_fewest_steps(step_counts: &[usize]) -> Result<usize, BaselineError> {
    if step_counts.is_empty() {
        return Err(BaselineError::BadArgument("no chains".into()));
    }
    let mut best = 0;
    let mut best_q = min_steps_score(step_counts[0])?;
    for (i, &n) in step_counts.iter().enumerate().skip(1) {
        let q = min_steps_score(n)?;
        if q > best_q {
            best = i;
            best_q = q;
        }
    }
    Ok(best)
}

/// The four single-generation scores for the tokens in `span`, oriented so
/// that higher means more uncertain.
pub fn single_generation_scores(
    trace: &InternalTrace,
    span: (usize, usize),
    vocab_size: usize,
) -> Result<[(Method, f64); 4], BaselineError> {
    let (start, end) = span;
    if start >= end {
        return Err(BaselineError::EmptyStep);
    }
    let mut logprobs = Vec::with_capacity(end - start);
    let mut entropies = Vec::with_capacity(end - start);
    let mut tops = Vec::with_capacity(end - start);
    for pos in start..end {
        let r = trace
            .at(pos)
            .ok_or(BaselineError::SpanOutOfRange { start, end })?;
        logprobs.push(r.chosen_logprob as f64);
        entropies.push(r.entropy as f64);
        tops.push(r.top_logprobs.iter().map(|&l| l as f64).collect::<Vec<_>>());
    }
    Ok([
        (Method::Msp, msp_uncertainty(&logprobs)?),
        (Method::MeanEntropy, mean_token_entropy(&entropies)?),
        (Method::Perplexity, perplexity(&logprobs)?),
        (Method::SelfCertainty, -self_certainty(&tops, vocab_size)?),
    ])
}

/// Seeded uniform scores in [0, 1).
pub fn random_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, "random-baseline", 0);
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

pub type ScoreKey = (String, usize, usize, Method);

/// Writes scores as JSONL. Fails on non-finite values and repeated keys.
pub fn write_score_table<W: Write>(
    w: &mut W,
    header: Option<&ArtifactHeader>,
    scores: &[StepScore],
) -> Result<(), BaselineError> {
    let mut seen = std::collections::HashSet::new();
    for s in scores {
        if !s.value.is_finite() {
            return Err(BaselineError::BadArgument(format!(
                "non-finite {} score for {}",
                s.method, s.problem_id
            )));
        }
        if !seen.insert((&s.problem_id, s.chain_index, s.step_index, s.method)) {
            return Err(BaselineError::DuplicateKey(format!(
                "{}/{}/{}/{}",
                s.problem_id, s.chain_index, s.step_index, s.method
            )));
        }
    }
    write_jsonl(w, header, scores)?;
    Ok(())
}

/// Reads a score table keyed by (problem, chain, step, method).
pub fn read_score_table<R: BufRead>(
    r: R,
) -> Result<(Option<ArtifactHeader>, BTreeMap<ScoreKey, StepScore>), BaselineError> {
    let (header, rows): (_, Vec<StepScore>) = read_jsonl(r)?;
    let mut table = BTreeMap::new();
    for s in rows {
        let key = (s.problem_id.clone(), s.chain_index, s.step_index, s.method);
        if table.insert(key, s.clone()).is_some() {
            return Err(BaselineError::DuplicateKey(format!(
                "{}/{}/{}/{}",
                s.problem_id, s.chain_index, s.step_index, s.method
            )));
        }
    }
    Ok((header, table))
}
