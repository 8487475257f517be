use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{LmCheckpoint, LmMeta, LM_FORMAT_VERSION};
use super::model::LanguageModel;
use super::{LmConfig, LmError};
use crate::hashing::token_corpus_hash;
use crate::nn::clip_global_norm;
use crate::numerics::{AdamHyper, AdamState, Tape};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainHyper {
    pub lr: f32,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of sequences held out for the reported NLL.
    pub heldout_frac: f64,
    pub clip_norm: f64,
    /// Linear warmup length in optimizer steps.
    pub warmup_steps: u64,
    /// Learning rate at the last step as a fraction of `lr`; cosine decay.
    pub final_lr_frac: f32,
}

impl Default for LmTrainHyper {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch: 16,
            epochs: 4,
            seed: 0,
            heldout_frac: 0.05,
            clip_norm: 1.0,
            warmup_steps: 100,
            final_lr_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    /// Token-weighted mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub heldout_nll: Option<f64>,
    pub heldout_sequences: usize,
    pub steps: u64,
}

/// Mean next-token NLL of `model` over `seqs` (token weighted).
pub fn mean_nll(model: &LanguageModel, seqs: &[&[usize]]) -> Result<f64, LmError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(16) {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let (loss, n) = model.nll_loss(&mut tape, &vars, chunk)?;
        total += tape.value(loss).item() as f64 * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(LmError::EmptyCorpus);
    }
    Ok(total / count as f64)
}

/// Learning rate at optimizer step `step` of `total`: linear warmup, then
/// cosine decay from `lr` to `lr * final_lr_frac`.
pub fn scheduled_lr(hyper: &LmTrainHyper, step: u64, total: u64) -> f32 {
    if step < hyper.warmup_steps {
        return hyper.lr * (step + 1) as f32 / hyper.warmup_steps as f32;
    }
    let span = total.saturating_sub(hyper.warmup_steps).max(1);
    let t = ((step - hyper.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = hyper.final_lr_frac as f64;
    let frac = floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    (hyper.lr as f64 * frac) as f32
}

/// Trains a fresh model on `corpus`. Deterministic given its inputs.
pub fn train_lm(
    corpus: &[Vec<usize>],
    config: &LmConfig,
    hyper: &LmTrainHyper,
) -> Result<(LmCheckpoint, LmTrainReport), LmError> {
    if corpus.iter().all(|s| s.len() < 2) {
        return Err(LmError::EmptyCorpus);
    }
    if let Some(s) = corpus.iter().find(|s| s.len() > config.context) {
        return Err(LmError::SequenceTooLong {
            len: s.len(),
            context: config.context,
        });
    }
    if hyper.batch == 0 || !(0.0..1.0).contains(&hyper.heldout_frac) {
        return Err(LmError::BadConfig("batch must be >= 1 and heldout_frac in [0, 1)".into()));
    }
    let mut model = LanguageModel::init(config.clone(), derive_seed(hyper.seed, "lm-init", 0))?;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut stream(hyper.seed, "lm-split", 0));
    let n_held = if corpus.len() >= 2 {
        ((corpus.len() as f64 * hyper.heldout_frac).round() as usize).min(corpus.len() - 1)
    } else {
        0
    };
    let held: Vec<&[usize]> = order[..n_held].iter().map(|&i| corpus[i].as_slice()).collect();
    let mut train: Vec<usize> = order[n_held..].to_vec();
    train.retain(|&i| corpus[i].len() >= 2);

    let mut adam = AdamState::new(
        &model.params,
        AdamHyper {
            lr: hyper.lr,
            ..AdamHyper::default()
        },
    );
    let total_steps = (train.len().div_ceil(hyper.batch) * hyper.epochs) as u64;
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        train.shuffle(&mut stream(hyper.seed, "lm-shuffle", epoch as u64));
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in train.chunks(hyper.batch) {
            let seqs: Vec<&[usize]> = batch.iter().map(|&i| corpus[i].as_slice()).collect();
            let mut tape = Tape::training(derive_seed(hyper.seed, "lm-dropout", adam.step_count()));
            let vars = model.bind(&mut tape);
            let (loss, n) = model.nll_loss(&mut tape, &vars, &seqs)?;
            total += tape.value(loss).item() as f64 * n as f64;
            count += n;
            let mut grads = tape.backward(loss)?;
            let mut g: Vec<_> = vars.iter().map(|&v| grads.take(v)).collect();
            clip_global_norm(&mut g, hyper.clip_norm);
            adam.hyper.lr = scheduled_lr(hyper, adam.step_count(), total_steps);
            adam.step(&mut model.params, &g)?;
        }
        epoch_losses.push(if count > 0 { total / count as f64 } else { f64::NAN });
    }
    let heldout_nll = if held.is_empty() {
        None
    } else {
        Some(mean_nll(&model, &held)?)
    };
    let report = LmTrainReport {
        epoch_losses,
        heldout_nll,
        heldout_sequences: held.len(),
        steps: adam.step_count(),
    };
    let meta = LmMeta {
        format_version: LM_FORMAT_VERSION,
        train_seed: hyper.seed,
        corpus_hash: token_corpus_hash(corpus),
        heldout_nll,
        config_hash: String::new(),
    };
    Ok((LmCheckpoint { model, meta }, report))
}
