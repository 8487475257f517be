use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{Decoder, DecoderStep};
use super::model::LanguageModel;
use super::vocab::{ANSWER_MARKER, END, NEWLINE};
use super::LmError;

/// Number of candidate log-probs stored per token.
pub const TRACE_TOP_K: usize = 20;
/// Number of preceding positions whose attention is stored per token.
pub const TRACE_LOOKBACK: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    pub temperature: f32,
    /// `None` disables the top-k cut.
    pub top_k: Option<usize>,
    pub top_p: f32,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl SamplingParams {
    /// Settings used to sample training chains.
    pub fn traindata(seed: u64) -> Self {
        Self {
            temperature: 1.0,
            top_k: Some(50),
            top_p: 0.95,
            max_new_tokens: 256,
            seed,
        }
    }

    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            top_k: None,
            top_p: 1.0,
            max_new_tokens,
            seed: 0,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0 || self.top_k == Some(1)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::BadSampling(m));
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad(format!("temperature {} must be >= 0", self.temperature));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > vocab_size {
                return bad(format!("top_k {k} outside [1, {vocab_size}]"));
            }
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p {} outside (0, 1]", self.top_p));
        }
        Ok(())
    }
}

/// Restricts a probability vector to its top-k entries, then to the smallest
/// prefix (in descending order) whose mass reaches `top_p`, and renormalizes.
/// Entries outside the support become zero. Ties keep the lower index first.
pub fn filter_distribution(probs: &[f64], top_k: Option<usize>, top_p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let k = top_k.unwrap_or(probs.len()).min(probs.len()).max(1);
    order.truncate(k);
    let kept: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut cum = 0.0;
    let mut cut = order.len();
    for (n, &i) in order.iter().enumerate() {
        cum += probs[i] / kept;
        if cum >= top_p - 1e-12 {
            cut = n + 1;
            break;
        }
    }
    order.truncate(cut);
    let mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in &order {
        out[i] = probs[i] / mass;
    }
    out
}

fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn sample_token(logits: &[f32], params: &SamplingParams, rng: &mut ChaCha8Rng) -> usize {
    if params.is_greedy() {
        return argmax(logits);
    }
    let t = params.temperature as f64;
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let mut probs: Vec<f64> = logits.iter().map(|&v| ((v as f64 - max) / t).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    let probs = filter_distribution(&probs, params.top_k, params.top_p as f64);
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return i;
        }
    }
    last
}

/// Internal state recorded for one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub position: usize,
    pub token: usize,
    /// Attention of this token's query to positions t-1..t-W, flattened as
    /// `[layer][head][lag]`; absent positions are zero.
    pub lookback: Vec<f32>,
    pub top_ids: Vec<usize>,
    /// Descending log-probs of the most likely candidates.
    pub top_logprobs: Vec<f32>,
    pub chosen_logprob: f32,
    /// Entropy (nats) of the full predictive distribution.
    pub entropy: f32,
}

impl TokenRecord {
    /// Builds a record from the logits that predicted `token` and the
    /// attention rows of `token`'s own query.
    pub fn new(
        position: usize,
        token: usize,
        logits: &[f32],
        attention: &[Vec<f32>],
        top_k: usize,
        lookback: usize,
    ) -> Self {
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let z: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
        let lse = max + z.ln();
        let mut entropy = 0.0;
        for &v in logits {
            let lp = v as f64 - lse;
            entropy -= lp.exp() * lp;
        }
        let entropy = entropy.clamp(0.0, (logits.len() as f64).ln());
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(top_k.min(logits.len()));
        let top_logprobs = order.iter().map(|&i| (logits[i] as f64 - lse) as f32).collect();
        let mut lb = Vec::with_capacity(attention.len() * lookback);
        for row in attention {
            for lag in 1..=lookback {
                lb.push(if position >= lag { row[position - lag] } else { 0.0 });
            }
        }
        Self {
            position,
            token,
            lookback: lb,
            top_ids: order,
            top_logprobs,
            chosen_logprob: (logits[token] as f64 - lse) as f32,
            entropy: entropy as f32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InternalTrace {
    pub top_k: usize,
    pub lookback: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub records: Vec<TokenRecord>,
}

impl InternalTrace {
    fn new(model: &LanguageModel) -> Self {
        Self {
            top_k: TRACE_TOP_K,
            lookback: TRACE_LOOKBACK,
            n_layers: model.config.n_layers,
            n_heads: model.config.n_heads,
            records: Vec::new(),
        }
    }

    /// Record for absolute sequence position `pos`, if traced.
    pub fn at(&self, pos: usize) -> Option<&TokenRecord> {
        let first = self.records.first()?.position;
        self.records.get(pos.checked_sub(first)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    End,
    Answer,
    MaxTokens,
    Context,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Prompt followed by generated tokens.
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    pub trace: InternalTrace,
    pub stop: StopReason,
}

impl Generation {
    pub fn generated(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }
}

/// A generation in progress that can be forked and extended piecewise.
#[derive(Debug, Clone)]
pub struct Continuation<'m> {
    decoder: Decoder<'m>,
    last: DecoderStep,
    rng: ChaCha8Rng,
    params: SamplingParams,
    generation: Generation,
    answered: bool,
    stop: Option<StopReason>,
}

impl<'m> Continuation<'m> {
    pub fn start(
        model: &'m LanguageModel,
        prompt: &[usize],
        params: &SamplingParams,
    ) -> Result<Self, LmError> {
        params.validate(model.config.vocab_size)?;
        if prompt.is_empty() || prompt.len() >= model.config.context {
            return Err(LmError::ContextOverflow {
                len: prompt.len(),
                context: model.config.context,
            });
        }
        let mut decoder = Decoder::new(model);
        let mut trace = InternalTrace::new(model);
        let mut last = decoder.step(prompt[0])?;
        for (p, &t) in prompt.iter().enumerate().skip(1) {
            let prev = std::mem::replace(&mut last, decoder.step(t)?);
            trace.records.push(TokenRecord::new(
                p,
                t,
                &prev.logits,
                &last.attention,
                TRACE_TOP_K,
                TRACE_LOOKBACK,
            ));
        }
        Ok(Self {
            decoder,
            last,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            params: params.clone(),
            generation: Generation {
                tokens: prompt.to_vec(),
                prompt_len: prompt.len(),
                trace,
                stop: StopReason::MaxTokens,
            },
            answered: false,
            stop: None,
        })
    }

    /// Copy of this continuation with its own random stream.
    pub fn fork(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.rng = ChaCha8Rng::seed_from_u64(seed);
        c
    }

    pub fn set_temperature(&mut self, temperature: f32) {
        self.params.temperature = temperature;
    }

    pub fn stopped(&self) -> Option<StopReason> {
        self.stop
    }

    pub fn generation(&self) -> &Generation {
        &self.generation
    }

    fn push(&mut self) -> Result<(), LmError> {
        let cfg = &self.decoder.model().config;
        let n_new = self.generation.tokens.len() - self.generation.prompt_len;
        if n_new >= self.params.max_new_tokens {
            self.stop = Some(StopReason::MaxTokens);
            return Ok(());
        }
        if self.decoder.len() >= cfg.context {
            self.stop = Some(StopReason::Context);
            return Ok(());
        }
        let token = sample_token(&self.last.logits, &self.params, &mut self.rng);
        let pos = self.decoder.len();
        let next = self.decoder.step(token)?;
        self.generation.trace.records.push(TokenRecord::new(
            pos,
            token,
            &self.last.logits,
            &next.attention,
            TRACE_TOP_K,
            TRACE_LOOKBACK,
        ));
        self.generation.tokens.push(token);
        self.last = next;
        if token == END {
            self.stop = Some(StopReason::End);
        } else if token == ANSWER_MARKER {
            self.answered = true;
        } else if token == NEWLINE && self.answered {
            self.stop = Some(StopReason::Answer);
        }
        Ok(())
    }

    /// Generates until a newline is emitted or generation stops. Returns
    /// the number of new tokens.
    pub fn extend_line(&mut self) -> Result<usize, LmError> {
        let before = self.generation.tokens.len();
        while self.stop.is_none() {
            self.push()?;
            if self.generation.tokens.len() > before
                && *self.generation.tokens.last().unwrap() == NEWLINE
            {
                break;
            }
        }
        Ok(self.generation.tokens.len() - before)
    }

    pub fn finish(mut self) -> Result<Generation, LmError> {
        while self.stop.is_none() {
            self.push()?;
        }
        self.generation.stop = self.stop.unwrap_or(StopReason::MaxTokens);
        Ok(self.generation)
    }
}

/// Samples a continuation of `prompt`. Stops at the end token, at the
/// newline closing an answer line, at `max_new_tokens`, or when the
/// context is full. The trace covers prompt positions >= 1 and every
/// generated token.
pub fn generate(
    model: &LanguageModel,
    prompt: &[usize],
    params: &SamplingParams,
) -> Result<Generation, LmError> {
    Continuation::start(model, prompt, params)?.finish()
}

/// Trace of an existing sequence for positions >= 1.
pub fn rescore(model: &LanguageModel, seq: &[usize]) -> Result<InternalTrace, LmError> {
    if seq.len() > model.config.context {
        return Err(LmError::ContextOverflow {
            len: seq.len(),
            context: model.config.context,
        });
    }
    let mut trace = InternalTrace::new(model);
    let Some(&first) = seq.first() else {
        return Ok(trace);
    };
    let mut decoder = Decoder::new(model);
    let mut last = decoder.step(first)?;
    for (p, &t) in seq.iter().enumerate().skip(1) {
        let next = decoder.step(t)?;
        trace.records.push(TokenRecord::new(
            p,
            t,
            &last.logits,
            &next.attention,
            TRACE_TOP_K,
            TRACE_LOOKBACK,
        ));
        last = next;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::LmConfig;

    fn small() -> LanguageModel {
        let cfg = LmConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            context: 48,
            ..LmConfig::default()
        };
        LanguageModel::init(cfg, 11).unwrap()
    }

    #[test]
    fn nucleus_keeps_top_two() {
        let out = filter_distribution(&[0.5, 0.3, 0.15, 0.05], None, 0.8);
        let want = [0.625, 0.375, 0.0, 0.0];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_applies_before_top_p() {
        // top_k=2 renormalizes to [0.625, 0.375]; p=0.6 then keeps one token.
        let out = filter_distribution(&[0.5, 0.3, 0.15, 0.05], Some(2), 0.6);
        assert_eq!(out, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn traindata_preset() {
        let p = SamplingParams::traindata(0);
        assert_eq!(p.top_k, Some(50));
        assert_eq!(p.top_p, 0.95);
        assert_eq!(p.temperature, 1.0);
        assert_eq!(p.max_new_tokens, 256);
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = SamplingParams::traindata(0);
        p.top_p = 0.0;
        assert!(p.validate(256).is_err());
        p.top_p = 1.0;
        p.top_k = Some(0);
        assert!(p.validate(256).is_err());
        p.top_k = Some(257);
        assert!(p.validate(256).is_err());
        p.top_k = None;
        p.temperature = -1.0;
        assert!(p.validate(256).is_err());
    }

    #[test]
    fn uniform_distribution_entropy() {
        let r = TokenRecord::new(1, 3, &[0.0; 16], &[], 5, 3);
        assert!((r.entropy as f64 - 16f64.ln()).abs() < 1e-6);
        assert!((r.chosen_logprob as f64 + 16f64.ln()).abs() < 1e-6);
        assert_eq!(r.top_ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn greedy_ignores_seed() {
        let m = small();
        let mut a = SamplingParams::greedy(20);
        let g1 = generate(&m, &[1, 30, 40], &a).unwrap();
        a.seed = 99;
        let g2 = generate(&m, &[1, 30, 40], &a).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn top_k_one_is_greedy() {
        let m = small();
        let greedy = generate(&m, &[1, 30], &SamplingParams::greedy(15)).unwrap();
        let p = SamplingParams {
            temperature: 3.0,
            top_k: Some(1),
            top_p: 0.5,
            max_new_tokens: 15,
            seed: 5,
        };
        assert_eq!(generate(&m, &[1, 30], &p).unwrap().tokens, greedy.tokens);
    }

    #[test]
    fn rescore_matches_generation() {
        let m = small();
        let g = generate(&m, &[1, 30, 40], &SamplingParams::traindata(4)).unwrap();
        let t = rescore(&m, &g.tokens).unwrap();
        assert_eq!(t.records.len(), g.trace.records.len());
        for (a, b) in t.records.iter().zip(&g.trace.records) {
            assert!((a.chosen_logprob - b.chosen_logprob).abs() <= 1e-5);
            assert_eq!(a.position, b.position);
        }
    }

    #[test]
    fn trace_invariants_hold() {
        let m = small();
        let g = generate(&m, &[1, 30, 40], &SamplingParams::traindata(8)).unwrap();
        let ln_v = (m.config.vocab_size as f32).ln();
        for r in &g.trace.records {
            assert!(r.top_logprobs.windows(2).all(|w| w[0] >= w[1]));
            let mass: f64 = r.top_logprobs.iter().map(|&l| (l as f64).exp()).sum();
            assert!(mass <= 1.0 + 1e-6);
            assert!(r.entropy >= 0.0 && r.entropy <= ln_v + 1e-5);
            assert_eq!(r.lookback.len(), 4 * TRACE_LOOKBACK);
        }
        assert_eq!(g.trace.records.len(), g.tokens.len() - 1);
    }

    #[test]
    fn stops_at_budget_and_context() {
        let m = small();
        let g = generate(&m, &[1, 30], &SamplingParams::traindata(1)).unwrap();
        assert!(g.tokens.len() <= m.config.context);
        let mut p = SamplingParams::traindata(1);
        p.max_new_tokens = 3;
        let g = generate(&m, &[1, 30], &p).unwrap();
        assert!(g.generated().len() <= 3);
        let long = vec![7; 48];
        assert!(matches!(
            generate(&m, &long, &p),
            Err(LmError::ContextOverflow { .. })
        ));
    }
}
