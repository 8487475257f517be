use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LmConfig, LmError};
use crate::nn::{linear, normal_init, segmented_attention};
use crate::numerics::{Tape, Tensor, Var};

const PER_LAYER: usize = 12;

// Offsets within one layer's parameter block.
pub(crate) const LN1_G: usize = 0;
pub(crate) const LN1_B: usize = 1;
pub(crate) const W_QKV: usize = 2;
pub(crate) const B_QKV: usize = 3;
pub(crate) const W_O: usize = 4;
pub(crate) const B_O: usize = 5;
pub(crate) const LN2_G: usize = 6;
pub(crate) const LN2_B: usize = 7;
pub(crate) const W_FF1: usize = 8;
pub(crate) const B_FF1: usize = 9;
pub(crate) const W_FF2: usize = 10;
pub(crate) const B_FF2: usize = 11;

/// Pre-norm GPT-style decoder with learned absolute positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub params: Vec<Tensor>,
}

impl LanguageModel {
    pub fn init(config: LmConfig, seed: u64) -> Result<Self, LmError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = d * config.ffn_mult;
        let v = config.vocab_size;
        let resid_std = 0.02 / (2.0 * config.n_layers as f32).sqrt();
        let mut params = vec![
            normal_init(&mut rng, v, d, 0.02),
            normal_init(&mut rng, config.context, d, 0.01),
        ];
        for _ in 0..config.n_layers {
            params.push(Tensor::full(1, d, 1.0));
            params.push(Tensor::zeros(1, d));
            params.push(normal_init(&mut rng, d, 3 * d, 0.02));
            params.push(Tensor::zeros(1, 3 * d));
            params.push(normal_init(&mut rng, d, d, resid_std));
            params.push(Tensor::zeros(1, d));
            params.push(Tensor::full(1, d, 1.0));
            params.push(Tensor::zeros(1, d));
            params.push(normal_init(&mut rng, d, f, 0.02));
            params.push(Tensor::zeros(1, f));
            params.push(normal_init(&mut rng, f, d, resid_std));
            params.push(Tensor::zeros(1, d));
        }
        params.push(Tensor::full(1, d, 1.0));
        params.push(Tensor::zeros(1, d));
        params.push(normal_init(&mut rng, d, v, 0.02));
        params.push(Tensor::zeros(1, v));
        Ok(Self { config, params })
    }

    pub fn from_parts(config: LmConfig, params: Vec<Tensor>) -> Result<Self, LmError> {
        config.validate()?;
        let expected = Self::init_shapes(&config);
        if params.len() != expected.len()
            || params
                .iter()
                .zip(&expected)
                .any(|(p, s)| p.shape() != s.as_slice())
        {
            return Err(LmError::Checkpoint(
                "tensor shapes do not match the config".into(),
            ));
        }
        Ok(Self { config, params })
    }

    fn init_shapes(config: &LmConfig) -> Vec<Vec<usize>> {
        let d = config.d_model;
        let f = d * config.ffn_mult;
        let v = config.vocab_size;
        let mut s = vec![vec![v, d], vec![config.context, d]];
        for _ in 0..config.n_layers {
            s.extend([
                vec![1, d],
                vec![1, d],
                vec![d, 3 * d],
                vec![1, 3 * d],
                vec![d, d],
                vec![1, d],
                vec![1, d],
                vec![1, d],
                vec![d, f],
                vec![1, f],
                vec![f, d],
                vec![1, d],
            ]);
        }
        s.extend([vec![1, d], vec![1, d], vec![d, v], vec![1, v]]);
        s
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub(crate) fn layer(&self, l: usize, which: usize) -> &Tensor {
        &self.params[2 + l * PER_LAYER + which]
    }

    pub(crate) fn tok_emb(&self) -> &Tensor {
        &self.params[0]
    }

    pub(crate) fn pos_emb(&self) -> &Tensor {
        &self.params[1]
    }

    pub(crate) fn final_block(&self, which: usize) -> &Tensor {
        &self.params[2 + self.config.n_layers * PER_LAYER + which]
    }

    /// Final-layer hidden states `[Σ len, d]` for a batch of sequences.
    fn hidden(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        seqs: &[&[usize]],
    ) -> Result<(Var, Vec<(usize, usize)>), LmError> {
        let cfg = &self.config;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        for s in seqs {
            if s.len() > cfg.context {
                return Err(LmError::SequenceTooLong {
                    len: s.len(),
                    context: cfg.context,
                });
            }
            segments.push((ids.len(), s.len()));
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        let tok = tape.embedding(vars[0], &ids)?;
        let pos = tape.embedding(vars[1], &positions)?;
        let mut x = tape.add(tok, pos)?;
        let p = cfg.dropout;
        for l in 0..cfg.n_layers {
            let at = |w: usize| vars[2 + l * PER_LAYER + w];
            let h = tape.layer_norm(x, at(LN1_G), at(LN1_B))?;
            let qkv = linear(tape, h, at(W_QKV), at(B_QKV))?;
            let a = segmented_attention(tape, qkv, &segments, cfg.d_model, cfg.n_heads, true)?;
            let a = linear(tape, a, at(W_O), at(B_O))?;
            let a = tape.dropout(a, p)?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, at(LN2_G), at(LN2_B))?;
            let h = linear(tape, h, at(W_FF1), at(B_FF1))?;
            let h = tape.gelu(h)?;
            let h = linear(tape, h, at(W_FF2), at(B_FF2))?;
            let h = tape.dropout(h, p)?;
            x = tape.add(x, h)?;
        }
        let base = 2 + cfg.n_layers * PER_LAYER;
        let x = tape.layer_norm(x, vars[base], vars[base + 1])?;
        Ok((x, segments))
    }

    /// Logits for every position of one sequence (`[len, |V|]`).
    pub fn logits(&self, tape: &mut Tape, vars: &[Var], seq: &[usize]) -> Result<Var, LmError> {
        let (x, _) = self.hidden(tape, vars, &[seq])?;
        let base = 2 + self.config.n_layers * PER_LAYER;
        Ok(linear(tape, x, vars[base + 2], vars[base + 3])?)
    }

    /// Mean next-token negative log-likelihood over a batch; also returns
    /// the number of predicted tokens.
    pub fn nll_loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        seqs: &[&[usize]],
    ) -> Result<(Var, usize), LmError> {
        let (x, segments) = self.hidden(tape, vars, seqs)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (s, &(start, len)) in seqs.iter().zip(&segments) {
            if len < 2 {
                continue;
            }
            rows.push(tape.slice_rows(x, start, len - 1)?);
            targets.extend_from_slice(&s[1..]);
        }
        if rows.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let h = tape.concat_rows(&rows)?;
        let base = 2 + self.config.n_layers * PER_LAYER;
        let logits = linear(tape, h, vars[base + 2], vars[base + 3])?;
        let ones = vec![1.0; self.config.vocab_size];
        let loss = tape.weighted_cross_entropy(logits, &targets, &ones)?;
        Ok((loss, targets.len()))
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }
}
