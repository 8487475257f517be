use serde::{Deserialize, Serialize};

use super::{aggregate_chain, argmax_first, Aggregation, ChainView, Scorer, TtsError};
use crate::rng::derive_seed;
use crate::taskgen::{parse_tokens, Problem, StepTrace};
use crate::toylm::vocab::{ANSWER_MARKER, END, NEWLINE};
use crate::toylm::{
    Continuation, Generation, LanguageModel, SamplingParams, StopReason, Vocabulary,
};

/// Line budget for online selection.
pub const DEFAULT_MAX_STEPS: usize = 24;

/// A sampled chain with its parse. `parsed` holds the parse error message
/// when the text is not a well-formed chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledChain {
    pub chain_index: usize,
    pub generation: Generation,
    pub parsed: Result<StepTrace, String>,
    pub correct: bool,
}

fn truncated(stop: Option<StopReason>) -> bool {
    !matches!(stop, Some(StopReason::End) | Some(StopReason::Answer))
}

impl SampledChain {
    pub fn new(problem: &Problem, chain_index: usize, generation: Generation) -> Self {
        let vocab = Vocabulary::new();
        let parsed = parse_tokens(
            generation.generated(),
            generation.prompt_len,
            truncated(Some(generation.stop)),
            &vocab,
        )
        .map_err(|e| e.to_string());
        let correct = parsed
            .as_ref()
            .is_ok_and(|p| p.answer.as_deref() == Some(problem.answer.as_str()));
        Self {
            chain_index,
            generation,
            parsed,
            correct,
        }
    }

    pub fn view<'a>(&'a self, problem: &'a Problem) -> Option<ChainView<'a>> {
        let parsed = self.parsed.as_ref().ok()?;
        Some(ChainView {
            problem,
            chain_index: self.chain_index,
            tokens: &self.generation.tokens,
            prompt_len: self.generation.prompt_len,
            trace: &self.generation.trace,
            parsed,
        })
    }
}

/// Seed of chain `j` of a problem's pool. Pools drawn with the same base
/// seed share their leading chains.
pub fn chain_seed(base: u64, problem_id: &str, j: usize) -> u64 {
    derive_seed(base, problem_id, j as u64)
}

/// Samples `n` chains, chain `j` from its own stream.
pub fn sample_pool(
    model: &LanguageModel,
    problem: &Problem,
    n: usize,
    params: &SamplingParams,
) -> Result<Vec<SampledChain>, TtsError> {
    if n == 0 {
        return Err(TtsError::BadArgument("pool size must be >= 1".into()));
    }
    let prompt = problem.prompt_tokens(&Vocabulary::new())?;
    (0..n)
        .map(|j| {
            let p = SamplingParams {
                seed: chain_seed(params.seed, &problem.id, j),
                ..params.clone()
            };
            let g = crate::toylm::generate(model, &prompt, &p)?;
            Ok(SampledChain::new(problem, j, g))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutcome {
    pub chain_index: usize,
    pub step_uncertainties: Vec<f64>,
    /// `None` when the chain could not be parsed or scored; ranks below
    /// every scored chain.
    pub aggregate: Option<f64>,
    pub answer: Option<String>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoNResult {
    pub problem_id: String,
    pub scorer: String,
    pub chains: Vec<ChainOutcome>,
    pub chosen: usize,
    pub answer: Option<String>,
    pub correct: bool,
    #[serde(default)]
    pub budget_exhausted: bool,
    /// Online only: qualities of the candidates at each extension.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidate_qualities: Vec<Vec<f64>>,
}

/// Picks the pool chain with the highest aggregate quality.
pub fn select_offline(
    problem: &Problem,
    pool: &[SampledChain],
    scorer: &dyn Scorer,
    mode: Aggregation,
) -> Result<BoNResult, TtsError> {
    if pool.is_empty() {
        return Err(TtsError::EmptyPool);
    }
    let mut chains = Vec::with_capacity(pool.len());
    for c in pool {
        let answer = c.parsed.as_ref().ok().and_then(|p| p.answer.clone());
        let scored = match c.view(problem) {
            None => Err(c.parsed.clone().err().unwrap_or_default()),
            Some(v) => scorer
                .step_uncertainties(&v)
                .and_then(|u| Ok((aggregate_chain(&u, mode)?, u)))
                .map_err(|e| e.to_string()),
        };
        let (step_uncertainties, aggregate, error) = match scored {
            Ok((q, u)) if q.is_finite() => (u, Some(q), None),
            Ok((_, u)) => (u, None, Some("non-finite quality".into())),
            Err(e) => (Vec::new(), None, Some(e)),
        };
        chains.push(ChainOutcome {
            chain_index: c.chain_index,
            step_uncertainties,
            aggregate,
            answer,
            correct: c.correct,
            error,
        });
    }
    let q: Vec<f64> = chains
        .iter()
        .map(|c| c.aggregate.unwrap_or(f64::NEG_INFINITY))
        .collect();
    let chosen = argmax_first(&q).expect("pool is nonempty");
    Ok(BoNResult {
        problem_id: problem.id.clone(),
        scorer: scorer.name(),
        answer: chains[chosen].answer.clone(),
        correct: chains[chosen].correct,
        chains,
        chosen,
        budget_exhausted: false,
        candidate_qualities: Vec::new(),
    })
}

pub fn offline_bon(
    model: &LanguageModel,
    problem: &Problem,
    scorer: &dyn Scorer,
    n: usize,
    params: &SamplingParams,
) -> Result<BoNResult, TtsError> {
    let pool = sample_pool(model, problem, n, params)?;
    select_offline(problem, &pool, scorer, Aggregation::Min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineConfig {
    pub n: usize,
    pub max_steps: usize,
    /// Temperature, filters, per-line token budget and seed.
    pub params: SamplingParams,
}

impl OnlineConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            n: super::ONLINE_POOL_SIZE,
            max_steps: DEFAULT_MAX_STEPS,
            params: SamplingParams {
                temperature: super::ONLINE_TEMPERATURE,
                ..SamplingParams::traindata(seed)
            },
        }
    }
}

/// Parse of a partial generation. Never fails: a prefix whose only line is
/// an answer yields no steps and that answer.
fn partial_parse(g: &Generation, vocab: &Vocabulary) -> StepTrace {
    let gen = g.generated();
    if let Ok(p) = parse_tokens(gen, g.prompt_len, true, vocab) {
        return p;
    }
    let answer = gen.iter().position(|&t| t == ANSWER_MARKER).and_then(|a| {
        let rest = &gen[a + 1..];
        let end = rest
            .iter()
            .position(|&t| t == NEWLINE || t == END)
            .unwrap_or(rest.len());
        vocab.detokenize(&rest[..end]).ok()
    });
    StepTrace {
        steps: Vec::new(),
        answer,
        truncated: true,
        warning: true,
    }
}

/// Grows one chain a line at a time: `n` candidate lines are sampled from
/// the current prefix and the one with the highest `1 - U` is kept.
pub fn online_bon(
    model: &LanguageModel,
    problem: &Problem,
    scorer: &dyn Scorer,
    cfg: &OnlineConfig,
) -> Result<BoNResult, TtsError> {
    if cfg.n == 0 || cfg.max_steps == 0 {
        return Err(TtsError::BadArgument("n and max_steps must be >= 1".into()));
    }
    let vocab = Vocabulary::new();
    let prompt = problem.prompt_tokens(&vocab)?;
    let base_seed = derive_seed(cfg.params.seed, &problem.id, 0);
    let mut current = Continuation::start(model, &prompt, &cfg.params)?;
    let mut step_uncertainties = Vec::new();
    let mut candidate_qualities = Vec::new();
    for s in 0..cfg.max_steps {
        if current.stopped().is_some() {
            break;
        }
        let before = current.generation().tokens.len();
        let mut candidates = Vec::with_capacity(cfg.n);
        let mut quality = Vec::with_capacity(cfg.n);
        for j in 0..cfg.n {
            let mut c = current.fork(derive_seed(base_seed, "online-candidate", (s * cfg.n + j) as u64));
            c.extend_line()?;
            let g = c.generation();
            let after = g.tokens.len();
            let q = if after == before {
                f64::NEG_INFINITY
            } else {
                let parsed = partial_parse(g, &vocab);
                let view = ChainView {
                    problem,
                    chain_index: 0,
                    tokens: &g.tokens,
                    prompt_len: g.prompt_len,
                    trace: &g.trace,
                    parsed: &parsed,
                };
                1.0 - scorer.span_uncertainty(&view, (before, after))?
            };
            quality.push(q);
            candidates.push(c);
        }
        let best = argmax_first(&quality).expect("n >= 1");
        step_uncertainties.push(1.0 - quality[best]);
        candidate_qualities.push(quality);
        current = candidates.swap_remove(best);
    }
    let stop = current.stopped();
    let mut generation = current.generation().clone();
    generation.stop = stop.unwrap_or(StopReason::MaxTokens);
    let parsed = partial_parse(&generation, &vocab);
    let answer = if truncated(stop) { None } else { parsed.answer.clone() };
    let correct = answer.as_deref() == Some(problem.answer.as_str());
    let aggregate = aggregate_chain(&step_uncertainties, Aggregation::Min)
        .ok()
        .filter(|q| q.is_finite());
    Ok(BoNResult {
        problem_id: problem.id.clone(),
        scorer: scorer.name(),
        chains: vec![ChainOutcome {
            chain_index: 0,
            step_uncertainties,
            aggregate,
            answer: answer.clone(),
            correct,
            error: None,
        }],
        chosen: 0,
        answer,
        correct,
        budget_exhausted: stop.is_none(),
        candidate_qualities,
    })
}
