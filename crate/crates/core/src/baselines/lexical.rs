use std::collections::BTreeSet;

use super::BaselineError;
use crate::rng::derive_seed;
use crate::toylm::vocab::{END, NEWLINE, STEP_MARKER};
use crate::toylm::{Continuation, LanguageModel, SamplingParams, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexicalScore {
    pub value: f64,
    /// Fewer than two alternatives finished their line; `value` is 1.
    pub sampler_failure: bool,
    pub terminated: usize,
}

/// Jaccard similarity of two token sets; two empty sets count as equal.
pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Content tokens of a step line: header, connectives and line breaks are
/// dropped.
fn body_set(line: &[usize], vocab: &Vocabulary) -> BTreeSet<usize> {
    let mut rest = line;
    if rest.first() == Some(&STEP_MARKER) {
        rest = &rest[1..];
        if rest.first().is_some_and(|&t| vocab.as_number(t).is_some()) {
            rest = &rest[1..];
        }
        if rest.first() == vocab.id(":").ok().as_ref() {
            rest = &rest[1..];
        }
    }
    let connectives: Vec<usize> = crate::taskgen::CONNECTIVES
        .iter()
        .filter_map(|w| vocab.id(w).ok())
        .collect();
    let start = rest
        .iter()
        .position(|t| !connectives.contains(t))
        .unwrap_or(rest.len());
    rest[start..]
        .iter()
        .copied()
        .filter(|&t| t != NEWLINE && t != END)
        .collect()
}

/// `1 - mean pairwise Jaccard` over `m` sampled continuations of `context`,
/// each cut at the first line break. Alternative `j` draws from a stream
/// derived from `params.seed` and `j`.
pub fn lexical_similarity_uncertainty(
    model: &LanguageModel,
    context: &[usize],
    m: usize,
    params: &SamplingParams,
) -> Result<LexicalScore, BaselineError> {
    if m < 2 {
        return Err(BaselineError::BadArgument(format!("need at least 2 samples, got {m}")));
    }
    let vocab = Vocabulary::new();
    let base = Continuation::start(model, context, params)?;
    let mut sets = Vec::with_capacity(m);
    for j in 0..m {
        let mut c = base.fork(derive_seed(params.seed, "lexical-sample", j as u64));
        c.extend_line()?;
        let line = &c.generation().tokens[context.len()..];
        if matches!(line.last(), Some(&NEWLINE) | Some(&END)) {
            sets.push(body_set(line, &vocab));
        }
    }
    if sets.len() < 2 {
        return Ok(LexicalScore {
            value: 1.0,
            sampler_failure: true,
            terminated: sets.len(),
        });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            total += jaccard(&sets[i], &sets[j]);
            pairs += 1;
        }
    }
    Ok(LexicalScore {
        value: (1.0 - total / pairs as f64).clamp(0.0, 1.0),
        sampler_failure: false,
        terminated: sets.len(),
    })
}
