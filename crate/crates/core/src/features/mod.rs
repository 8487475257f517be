//! Per-token feature matrices for reasoning steps, built from an
//! [`InternalTrace`](crate::toylm::InternalTrace).
//!
//! Row layout for each token: lookback attention for every selected
//! (layer, head) pair and lag `1..=W`, then the top-K log-probs in
//! descending order, then the chosen-token log-prob and the entropy when
//! enabled.

mod file;

pub use file::{read_feature_file, write_feature_file, FEATURE_FORMAT_VERSION, FEATURE_MAGIC};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::taskgen::StepTrace;
use crate::toylm::InternalTrace;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("span {start}..{end} is outside the traced positions")]
    SpanOutOfRange { start: usize, end: usize },
    #[error("trace stores {available} candidates, {requested} requested")]
    InsufficientTopK { requested: usize, available: usize },
    #[error("invalid feature config: {0}")]
    BadConfig(String),
    #[error("corrupt feature file header: {0}")]
    CorruptHeader(String),
    #[error("feature file version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("feature width {found} does not match config width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// Number of preceding positions, 1 to 3.
    pub lookback: usize,
    pub top_k: usize,
    /// Selected (layer, head) pairs in row order.
    pub heads: Vec<(usize, usize)>,
    pub chosen_logprob: bool,
    pub entropy: bool,
}

impl FeatureConfig {
    /// Every head of a model, W = 3, K = 10, both scalars.
    pub fn all_heads(n_layers: usize, n_heads: usize) -> Self {
        Self {
            lookback: 3,
            top_k: 10,
            heads: (0..n_layers)
                .flat_map(|l| (0..n_heads).map(move |h| (l, h)))
                .collect(),
            chosen_logprob: true,
            entropy: true,
        }
    }

    pub fn width(&self) -> usize {
        self.heads.len() * self.lookback
            + self.top_k
            + self.chosen_logprob as usize
            + self.entropy as usize
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(1..=3).contains(&self.lookback) {
            return Err(FeatureError::BadConfig("lookback must be 1..=3".into()));
        }
        if self.top_k == 0 {
            return Err(FeatureError::BadConfig("top_k must be >= 1".into()));
        }
        if self.heads.is_empty() {
            return Err(FeatureError::BadConfig("no heads selected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepFeatures {
    pub problem_id: String,
    pub chain_index: usize,
    /// 0-based step index within the chain.
    pub step_index: usize,
    /// `[T_step, D]`.
    pub data: Tensor,
}

impl StepFeatures {
    pub fn tokens(&self) -> usize {
        self.data.rows()
    }

    pub fn width(&self) -> usize {
        self.data.cols()
    }
}

/// Feature rows for sequence positions `span.0..span.1`.
pub fn extract_rows(
    trace: &InternalTrace,
    span: (usize, usize),
    cfg: &FeatureConfig,
) -> Result<Tensor, FeatureError> {
    cfg.validate()?;
    if cfg.top_k > trace.top_k {
        return Err(FeatureError::InsufficientTopK {
            requested: cfg.top_k,
            available: trace.top_k,
        });
    }
    if cfg.lookback > trace.lookback {
        return Err(FeatureError::BadConfig(format!(
            "trace stores lookback {}, {} requested",
            trace.lookback, cfg.lookback
        )));
    }
    if let Some(&(l, h)) = cfg
        .heads
        .iter()
        .find(|&&(l, h)| l >= trace.n_layers || h >= trace.n_heads)
    {
        return Err(FeatureError::BadConfig(format!("head ({l}, {h}) not in trace")));
    }
    let (start, end) = span;
    let out_of_range = FeatureError::SpanOutOfRange { start, end };
    if start >= end {
        return Err(out_of_range);
    }
    let first = match trace.records.first() {
        Some(r) => r.position,
        None => return Err(out_of_range),
    };
    if start < first || end > first + trace.records.len() {
        return Err(out_of_range);
    }
    let d = cfg.width();
    let mut data = Vec::with_capacity((end - start) * d);
    for r in &trace.records[start - first..end - first] {
        for &(l, h) in &cfg.heads {
            let base = (l * trace.n_heads + h) * trace.lookback;
            data.extend_from_slice(&r.lookback[base..base + cfg.lookback]);
        }
        data.extend_from_slice(&r.top_logprobs[..cfg.top_k]);
        if cfg.chosen_logprob {
            data.push(r.chosen_logprob);
        }
        if cfg.entropy {
            data.push(r.entropy);
        }
    }
    Ok(Tensor::matrix(end - start, d, data))
}

pub fn extract_step_features(
    trace: &InternalTrace,
    span: (usize, usize),
    cfg: &FeatureConfig,
    problem_id: &str,
    chain_index: usize,
    step_index: usize,
) -> Result<StepFeatures, FeatureError> {
    Ok(StepFeatures {
        problem_id: problem_id.to_string(),
        chain_index,
        step_index,
        data: extract_rows(trace, span, cfg)?,
    })
}

/// Features for every step of a parsed chain.
pub fn extract_chain(
    trace: &InternalTrace,
    steps: &StepTrace,
    cfg: &FeatureConfig,
    problem_id: &str,
    chain_index: usize,
) -> Result<Vec<StepFeatures>, FeatureError> {
    steps
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| extract_step_features(trace, s.span, cfg, problem_id, chain_index, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::{generate, LanguageModel, LmConfig, SamplingParams};

    fn trace() -> InternalTrace {
        let cfg = LmConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            context: 64,
            ..LmConfig::default()
        };
        let m = LanguageModel::init(cfg, 5).unwrap();
        let mut p = SamplingParams::traindata(2);
        p.max_new_tokens = 20;
        generate(&m, &[1, 40, 41], &p).unwrap().trace
    }

    #[test]
    fn default_width_for_two_by_four() {
        let cfg = FeatureConfig::all_heads(2, 4);
        assert_eq!(cfg.width(), 36);
        let f = extract_rows(&trace(), (1, 6), &cfg).unwrap();
        assert_eq!(f.shape(), &[5, 36]);
    }

    #[test]
    fn first_position_zero_fills() {
        let cfg = FeatureConfig::all_heads(2, 4);
        let f = extract_rows(&trace(), (1, 3), &cfg).unwrap();
        // position 1 has only one predecessor: lags 2 and 3 are absent
        for pair in 0..8 {
            assert!(f.get(0, pair * 3) > 0.0);
            assert_eq!(f.get(0, pair * 3 + 1), 0.0);
            assert_eq!(f.get(0, pair * 3 + 2), 0.0);
            assert_eq!(f.get(1, pair * 3 + 2), 0.0);
        }
    }

    #[test]
    fn value_ranges() {
        let cfg = FeatureConfig::all_heads(2, 4);
        let t = trace();
        let end = t.records.last().unwrap().position + 1;
        let f = extract_rows(&t, (1, end), &cfg).unwrap();
        for r in 0..f.rows() {
            let row = f.row_slice(r);
            assert!(row[..24].iter().all(|&a| (0.0..=1.0).contains(&a)));
            assert!(row[24..35].iter().all(|&l| l <= 0.0));
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn adjacent_spans_concatenate() {
        let cfg = FeatureConfig::all_heads(2, 4);
        let t = trace();
        let whole = extract_rows(&t, (2, 9), &cfg).unwrap();
        let a = extract_rows(&t, (2, 5), &cfg).unwrap();
        let b = extract_rows(&t, (5, 9), &cfg).unwrap();
        let mut joined = a.data().to_vec();
        joined.extend_from_slice(b.data());
        assert_eq!(whole.data(), joined.as_slice());
    }

    #[test]
    fn errors() {
        let t = trace();
        let cfg = FeatureConfig::all_heads(2, 4);
        assert!(matches!(
            extract_rows(&t, (0, 3), &cfg),
            Err(FeatureError::SpanOutOfRange { .. })
        ));
        assert!(matches!(
            extract_rows(&t, (3, 3), &cfg),
            Err(FeatureError::SpanOutOfRange { .. })
        ));
        assert!(matches!(
            extract_rows(&t, (1, 1000), &cfg),
            Err(FeatureError::SpanOutOfRange { .. })
        ));
        let mut big = cfg.clone();
        big.top_k = 50;
        assert!(matches!(
            extract_rows(&t, (1, 3), &big),
            Err(FeatureError::InsufficientTopK { requested: 50, .. })
        ));
        let mut bad = cfg.clone();
        bad.lookback = 4;
        assert!(matches!(
            extract_rows(&t, (1, 3), &bad),
            Err(FeatureError::BadConfig(_))
        ));
        bad = cfg;
        bad.heads = vec![(2, 0)];
        assert!(extract_rows(&t, (1, 3), &bad).is_err());
    }

    #[test]
    fn subset_of_heads_and_flags() {
        let cfg = FeatureConfig {
            lookback: 1,
            top_k: 3,
            heads: vec![(1, 2)],
            chosen_logprob: false,
            entropy: true,
        };
        assert_eq!(cfg.width(), 5);
        let t = trace();
        let f = extract_rows(&t, (4, 5), &cfg).unwrap();
        let r = &t.records[3];
        assert_eq!(r.position, 4);
        assert_eq!(f.get(0, 0), r.lookback[(4 + 2) * 3]);
        assert_eq!(f.get(0, 4), r.entropy);
    }
}
