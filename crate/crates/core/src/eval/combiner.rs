use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::rng::stream;

/// Problems used to fit the combiner.
pub const COMBINER_SUBSET: usize = 200;

/// Logistic model over two standardized scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinerModel {
    pub w_a: f64,
    pub w_b: f64,
    pub bias: f64,
    pub mean: [f64; 2],
    pub scale: [f64; 2],
    /// Mean log loss before each iteration and after the last.
    pub loss_history: Vec<f64>,
}

impl CombinerModel {
    fn logit(&self, a: f64, b: f64) -> f64 {
        self.w_a * (a - self.mean[0]) / self.scale[0]
            + self.w_b * (b - self.mean[1]) / self.scale[1]
            + self.bias
    }

    /// Probability of the positive class.
    pub fn apply(&self, a: f64, b: f64) -> f64 {
        let z = self.logit(a, b);
        1.0 / (1.0 + (-z).exp())
    }

    pub fn apply_all(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| self.apply(x, y)).collect()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    let sd = var.sqrt();
    (m, if sd > 1e-12 { sd } else { 1.0 })
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Full-batch gradient descent on the mean log loss from zero weights.
pub fn fit_combiner(
    a: &[f64],
    b: &[f64],
    labels: &[bool],
    iterations: usize,
    lr: f64,
) -> Result<CombinerModel, EvalError> {
    for other in [b.len(), labels.len()] {
        if other != a.len() {
            return Err(EvalError::LengthMismatch {
                left: a.len(),
                right: other,
            });
        }
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == labels.len() {
        return Err(EvalError::DegenerateLabels);
    }
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let xa: Vec<f64> = a.iter().map(|v| (v - ma) / sa).collect();
    let xb: Vec<f64> = b.iter().map(|v| (v - mb) / sb).collect();
    let n = a.len() as f64;
    let mut w = [0.0f64; 3];
    let mut history = Vec::with_capacity(iterations + 1);
    for it in 0..=iterations {
        let mut g = [0.0f64; 3];
        let mut loss = 0.0;
        for i in 0..a.len() {
            let z = w[0] * xa[i] + w[1] * xb[i] + w[2];
            let y = labels[i] as u8 as f64;
            // -[y log s(z) + (1-y) log(1 - s(z))]
            loss += softplus(z) - y * z;
            let r = 1.0 / (1.0 + (-z).exp()) - y;
            g[0] += r * xa[i];
            g[1] += r * xb[i];
            g[2] += r;
        }
        history.push(loss / n);
        if it == iterations {
            break;
        }
        for k in 0..3 {
            w[k] -= lr * g[k] / n;
        }
    }
    Ok(CombinerModel {
        w_a: w[0],
        w_b: w[1],
        bias: w[2],
        mean: [ma, mb],
        scale: [sa, sb],
        loss_history: history,
    })
}

/// `k` distinct problem ids drawn without replacement, in draw order.
pub fn problem_subset(ids: &[String], k: usize, seed: u64) -> Result<Vec<String>, EvalError> {
    let mut unique: Vec<&String> = Vec::new();
    for id in ids {
        if !unique.contains(&id) {
            unique.push(id);
        }
    }
    if k > unique.len() {
        return Err(EvalError::KTooLarge {
            k,
            n: unique.len(),
        });
    }
    unique.shuffle(&mut stream(seed, "combiner-subset", 0));
    Ok(unique[..k].iter().map(|s| s.to_string()).collect())
}
