//! Uncertainty head: projection, transformer encoder over the step's token
//! features, mean pooling, and a two-layer classifier whose class 1 means
//! "incorrect step".

mod checkpoint;
mod train;

pub use checkpoint::{read_uhead, write_uhead, UHEAD_FORMAT_VERSION, UHEAD_MAGIC};
pub use train::{train_uhead, EpochMetrics, UHeadCheckpoint, UHeadTrainHyper};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{linear, normal_init, segmented_attention};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

/// Index of the "incorrect" class in the logits.
pub const INCORRECT: usize = 1;

const PER_LAYER: usize = 12;

#[derive(Debug, Error)]
pub enum UHeadError {
    #[error("feature width {found} does not match model input width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("step has no tokens")]
    EmptyStep,
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UHeadConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub dropout: f32,
    /// Steps longer than this are mean-pooled in contiguous chunks down to
    /// this many rows.
    pub max_len: usize,
    pub positional: bool,
}

impl UHeadConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            d_model: 512,
            n_heads: 16,
            n_layers: 1,
            ffn_mult: 4,
            dropout: 0.1,
            max_len: 64,
            positional: true,
        }
    }

    pub fn validate(&self) -> Result<(), UHeadError> {
        let bad = |m: &str| Err(UHeadError::BadConfig(m.to_string()));
        if self.input_dim == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_len == 0 {
            return bad("dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.n_layers == 0 || self.ffn_mult == 0 {
            return bad("n_layers and ffn_mult must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        let (d, f) = (self.d_model, self.d_model * self.ffn_mult);
        let mut s = vec![(self.input_dim, d), (1, d)];
        if self.positional {
            s.push((self.max_len, d));
        }
        for _ in 0..self.n_layers {
            s.extend([
                (1, d),
                (1, d),
                (d, 3 * d),
                (1, 3 * d),
                (d, d),
                (1, d),
                (1, d),
                (1, d),
                (d, f),
                (1, f),
                (f, d),
                (1, d),
            ]);
        }
        s.extend([(d, d), (1, d), (d, 2), (1, 2)]);
        s
    }

    pub fn parameter_count(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UHead {
    pub config: UHeadConfig,
    pub params: Vec<Tensor>,
    /// Per-feature standardization applied before the projection.
    pub input_mean: Vec<f32>,
    pub input_scale: Vec<f32>,
}

/// Reduces `x` to at most `max_len` rows by averaging contiguous chunks.
pub fn chunk_pool(x: &Tensor, max_len: usize) -> Tensor {
    let (t, d) = (x.rows(), x.cols());
    if t <= max_len {
        return x.clone();
    }
    let mut out = vec![0.0f64; max_len * d];
    let mut counts = vec![0usize; max_len];
    for i in 0..t {
        let c = i * max_len / t;
        counts[c] += 1;
        for (o, &v) in out[c * d..(c + 1) * d].iter_mut().zip(x.row_slice(i)) {
            *o += v as f64;
        }
    }
    let data = out
        .chunks(d)
        .zip(&counts)
        .flat_map(|(row, &n)| row.iter().map(move |&v| (v / n as f64) as f32))
        .collect();
    Tensor::matrix(max_len, d, data)
}

impl UHead {
    pub fn init(config: UHeadConfig, seed: u64) -> Result<Self, UHeadError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (config.d_model, config.d_model * config.ffn_mult);
        let pos = config
            .positional
            .then(|| normal_init(&mut rng, config.max_len, d, 0.02));
        let mut w = |r: usize, c: usize| normal_init(&mut rng, r, c, (1.0 / r as f32).sqrt());
        let mut params = vec![w(config.input_dim, d), Tensor::zeros(1, d)];
        params.extend(pos);
        for _ in 0..config.n_layers {
            params.extend([
                Tensor::full(1, d, 1.0),
                Tensor::zeros(1, d),
                w(d, 3 * d),
                Tensor::zeros(1, 3 * d),
                w(d, d),
                Tensor::zeros(1, d),
                Tensor::full(1, d, 1.0),
                Tensor::zeros(1, d),
                w(d, f),
                Tensor::zeros(1, f),
                w(f, d),
                Tensor::zeros(1, d),
            ]);
        }
        params.extend([w(d, d), Tensor::zeros(1, d), w(d, 2), Tensor::zeros(1, 2)]);
        Ok(Self {
            input_mean: vec![0.0; config.input_dim],
            input_scale: vec![1.0; config.input_dim],
            config,
            params,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    fn prepare(&self, step: &Tensor) -> Result<Tensor, UHeadError> {
        if step.cols() != self.config.input_dim {
            return Err(UHeadError::WidthMismatch {
                expected: self.config.input_dim,
                found: step.cols(),
            });
        }
        let mut x = chunk_pool(step, self.config.max_len);
        let d = x.cols();
        for (j, v) in x.data_mut().iter_mut().enumerate() {
            let c = j % d;
            *v = (*v - self.input_mean[c]) * self.input_scale[c];
        }
        Ok(x)
    }

    /// Logits `[B, 2]` for a batch of steps.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        steps: &[&Tensor],
    ) -> Result<Var, UHeadError> {
        if steps.is_empty() {
            return Err(UHeadError::EmptyDataset);
        }
        let cfg = &self.config;
        let mut rows = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(steps.len());
        for s in steps {
            if s.is_empty() {
                return Err(UHeadError::EmptyStep);
            }
            let x = self.prepare(s)?;
            segments.push((positions.len(), x.rows()));
            positions.extend(0..x.rows());
            rows.extend_from_slice(x.data());
        }
        let n = positions.len();
        let input = tape.constant(Tensor::matrix(n, cfg.input_dim, rows));
        let mut x = linear(tape, input, vars[0], vars[1])?;
        let mut at = 2;
        if cfg.positional {
            let pos = tape.embedding(vars[2], &positions)?;
            x = tape.add(x, pos)?;
            at = 3;
        }
        for l in 0..cfg.n_layers {
            let v = |w: usize| vars[at + l * PER_LAYER + w];
            let h = tape.layer_norm(x, v(0), v(1))?;
            let qkv = linear(tape, h, v(2), v(3))?;
            let a = segmented_attention(tape, qkv, &segments, cfg.d_model, cfg.n_heads, false)?;
            let a = linear(tape, a, v(4), v(5))?;
            let a = tape.dropout(a, cfg.dropout)?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, v(6), v(7))?;
            let h = linear(tape, h, v(8), v(9))?;
            let h = tape.gelu(h)?;
            let h = linear(tape, h, v(10), v(11))?;
            let h = tape.dropout(h, cfg.dropout)?;
            x = tape.add(x, h)?;
        }
        let pooled = if segments.len() == 1 {
            tape.mean_rows(x)?
        } else {
            let mut parts = Vec::with_capacity(segments.len());
            for &(start, len) in &segments {
                let s = tape.slice_rows(x, start, len)?;
                parts.push(tape.mean_rows(s)?);
            }
            tape.concat_rows(&parts)?
        };
        let h = at + cfg.n_layers * PER_LAYER;
        let z = linear(tape, pooled, vars[h], vars[h + 1])?;
        let z = tape.dropout(z, cfg.dropout)?;
        let z = tape.gelu(z)?;
        Ok(linear(tape, z, vars[h + 2], vars[h + 3])?)
    }

    /// Inference logits for each step.
    pub fn logits(&self, steps: &[&Tensor]) -> Result<Vec<[f32; 2]>, UHeadError> {
        let mut out = Vec::with_capacity(steps.len());
        for chunk in steps.chunks(64) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape);
            let z = self.forward(&mut tape, &vars, chunk)?;
            let z = tape.value(z);
            out.extend((0..z.rows()).map(|r| [z.get(r, 0), z.get(r, 1)]));
        }
        Ok(out)
    }

    /// Probability that each step is incorrect.
    pub fn score_steps(&self, steps: &[&Tensor]) -> Result<Vec<f64>, UHeadError> {
        Ok(self
            .logits(steps)?
            .into_iter()
            .map(|z| {
                let gap = z[INCORRECT] as f64 - z[1 - INCORRECT] as f64;
                1.0 / (1.0 + (-gap).exp())
            })
            .collect())
    }

    pub fn score_step(&self, step: &Tensor) -> Result<f64, UHeadError> {
        Ok(self.score_steps(&[step])?[0])
    }
}
