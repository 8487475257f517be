use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{UHead, UHeadConfig, UHeadError, INCORRECT};
use crate::eval::pr_auc;
use crate::features::StepFeatures;
use crate::hashing::hex_lower;
use crate::numerics::{AdamHyper, AdamState, Tape, Tensor};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UHeadTrainHyper {
    pub lr: f32,
    pub batch: usize,
    pub epochs: usize,
    /// Loss weight of the incorrect class.
    pub pos_weight: f32,
    /// Fraction of problems (taken from the end) used for validation.
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for UHeadTrainHyper {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch: 128,
            epochs: 5,
            pos_weight: 3.0,
            val_frac: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_pr_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UHeadCheckpoint {
    pub head: UHead,
    pub hyper: UHeadTrainHyper,
    pub data_hash: String,
    pub metrics: Vec<EpochMetrics>,
    /// 0-based epoch whose weights were kept.
    pub selected_epoch: usize,
    /// Hash of the run configuration; empty outside the pipeline.
    pub config_hash: String,
}

fn data_hash(steps: &[StepFeatures], incorrect: &[bool]) -> String {
    let mut h = Sha256::new();
    for (s, &y) in steps.iter().zip(incorrect) {
        h.update((s.problem_id.len() as u64).to_le_bytes());
        h.update(s.problem_id.as_bytes());
        h.update((s.chain_index as u64).to_le_bytes());
        h.update((s.step_index as u64).to_le_bytes());
        h.update((s.tokens() as u64).to_le_bytes());
        h.update((s.width() as u64).to_le_bytes());
        for v in s.data.data() {
            h.update(v.to_le_bytes());
        }
        h.update([y as u8]);
    }
    hex_lower(&h.finalize())
}

/// Indices of validation steps: all steps of the last `val_frac` of
/// problems, in order of first appearance.
fn validation_split(steps: &[StepFeatures], val_frac: f64) -> (Vec<usize>, Vec<usize>) {
    let mut problems: Vec<&str> = Vec::new();
    for s in steps {
        if problems.last() != Some(&s.problem_id.as_str())
            && !problems.contains(&s.problem_id.as_str())
        {
            problems.push(&s.problem_id);
        }
    }
    let n_val = if problems.len() >= 2 {
        ((problems.len() as f64 * val_frac).ceil() as usize).clamp(1, problems.len() - 1)
    } else {
        0
    };
    let val: std::collections::HashSet<&str> =
        problems[problems.len() - n_val..].iter().copied().collect();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, s) in steps.iter().enumerate() {
        if val.contains(s.problem_id.as_str()) {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    (train, held)
}

fn standardization(steps: &[StepFeatures], idx: &[usize], d: usize) -> (Vec<f32>, Vec<f32>) {
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    let mut n = 0usize;
    for &i in idx {
        for r in 0..steps[i].tokens() {
            for (j, &v) in steps[i].data.row_slice(r).iter().enumerate() {
                sum[j] += v as f64;
                sq[j] += v as f64 * v as f64;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let scale = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let sd = (q / n - m * m).max(0.0).sqrt();
            if sd > 1e-6 {
                (1.0 / sd) as f32
            } else {
                1.0
            }
        })
        .collect();
    (mean.iter().map(|&m| m as f32).collect(), scale)
}

/// Mean weighted loss and incorrect-class probabilities over `idx`.
fn evaluate(
    head: &UHead,
    steps: &[StepFeatures],
    incorrect: &[bool],
    idx: &[usize],
    weights: &[f32; 2],
) -> Result<(f64, Vec<f64>), UHeadError> {
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &steps[i].data).collect();
    let logits = head.logits(&refs)?;
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(idx.len());
    for (z, &i) in logits.iter().zip(idx) {
        let (a, b) = (z[0] as f64, z[1] as f64);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        let t = if incorrect[i] { INCORRECT } else { 1 - INCORRECT };
        loss += weights[t] as f64 * (lse - z[t] as f64);
        probs.push((z[INCORRECT] as f64 - lse).exp());
    }
    Ok((loss / idx.len().max(1) as f64, probs))
}

/// Trains a head on per-step features; `incorrect[i]` labels step `i`.
/// Keeps the epoch with the best validation average precision.
pub fn train_uhead(
    steps: &[StepFeatures],
    incorrect: &[bool],
    config: &UHeadConfig,
    hyper: &UHeadTrainHyper,
) -> Result<UHeadCheckpoint, UHeadError> {
    if steps.is_empty() {
        return Err(UHeadError::EmptyDataset);
    }
    if steps.len() != incorrect.len() {
        return Err(UHeadError::BadConfig(format!(
            "{} steps but {} labels",
            steps.len(),
            incorrect.len()
        )));
    }
    let positives = incorrect.iter().filter(|&&y| y).count();
    if positives == 0 || positives == incorrect.len() {
        return Err(UHeadError::DegenerateLabels);
    }
    if hyper.batch == 0 || hyper.epochs == 0 || !(hyper.val_frac > 0.0 && hyper.val_frac < 1.0) {
        return Err(UHeadError::BadConfig(
            "batch and epochs must be >= 1 and val_frac in (0, 1)".into(),
        ));
    }
    if let Some(s) = steps.iter().find(|s| s.width() != config.input_dim) {
        return Err(UHeadError::WidthMismatch {
            expected: config.input_dim,
            found: s.width(),
        });
    }
    let (mut train, val) = validation_split(steps, hyper.val_frac);
    let mut head = UHead::init(config.clone(), derive_seed(hyper.seed, "uhead-init", 0))?;
    let (mean, scale) = standardization(steps, &train, config.input_dim);
    head.input_mean = mean;
    head.input_scale = scale;

    let weights = {
        let mut w = [1.0f32; 2];
        w[INCORRECT] = hyper.pos_weight;
        w
    };
    let mut adam = AdamState::new(
        &head.params,
        AdamHyper {
            lr: hyper.lr,
            ..AdamHyper::default()
        },
    );
    let mut metrics = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    for epoch in 0..hyper.epochs {
        train.shuffle(&mut stream(hyper.seed, "uhead-shuffle", epoch as u64));
        let mut total = 0.0;
        for batch in train.chunks(hyper.batch) {
            let refs: Vec<&Tensor> = batch.iter().map(|&i| &steps[i].data).collect();
            let targets: Vec<usize> = batch
                .iter()
                .map(|&i| if incorrect[i] { INCORRECT } else { 1 - INCORRECT })
                .collect();
            let mut tape =
                Tape::training(derive_seed(hyper.seed, "uhead-dropout", adam.step_count()));
            let vars = head.bind(&mut tape);
            let z = head.forward(&mut tape, &vars, &refs)?;
            let loss = tape.weighted_cross_entropy(z, &targets, &weights)?;
            total += tape.value(loss).item() as f64 * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
            adam.step(&mut head.params, &g)?;
        }
        let train_loss = total / train.len().max(1) as f64;
        let (val_loss, val_pr_auc) = if val.is_empty() {
            (None, None)
        } else {
            let (l, p) = evaluate(&head, steps, incorrect, &val, &weights)?;
            let labels: Vec<bool> = val.iter().map(|&i| incorrect[i]).collect();
            (Some(l), pr_auc(&labels, &p).ok())
        };
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            val_pr_auc,
        });
        // without a usable validation score the latest epoch wins
        let key = val_pr_auc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().map_or(true, |(b, _, _)| key > *b || key == f64::NEG_INFINITY) {
            best = Some((key, epoch, head.params.clone()));
        }
    }
    let (_, selected_epoch, params) = best.expect("at least one epoch");
    head.params = params;
    Ok(UHeadCheckpoint {
        head,
        hyper: hyper.clone(),
        data_hash: data_hash(steps, incorrect),
        metrics,
        selected_epoch,
        config_hash: String::new(),
    })
}
