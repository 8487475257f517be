use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::toylm::{Decoder, LanguageModel, LmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetMode {
    FarthestFirst,
    NearestMedian,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Index of the largest value, lowest index on ties.
fn argmax(v: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Picks `k` points. Farthest-first starts at the point farthest from the
/// centroid and repeatedly adds the point whose nearest selected point is
/// farthest; indices come back in selection order. Nearest-median returns
/// the `k` points closest to the coordinate-wise median, nearest first.
pub fn diversity_subset(
    points: &[Vec<f64>],
    k: usize,
    mode: SubsetMode,
) -> Result<Vec<usize>, EvalError> {
    let n = points.len();
    if k > n {
        return Err(EvalError::KTooLarge { k, n });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let d = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(EvalError::LengthMismatch {
            left: d,
            right: p.len(),
        });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    match mode {
        SubsetMode::FarthestFirst => {
            let centroid: Vec<f64> = (0..d)
                .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
                .collect();
            let first = argmax(points.iter().map(|p| dist(p, &centroid)));
            let mut chosen = vec![first];
            let mut nearest: Vec<f64> = points.iter().map(|p| dist(p, &points[first])).collect();
            while chosen.len() < k {
                let next = argmax(
                    nearest
                        .iter()
                        .enumerate()
                        .map(|(i, &m)| if chosen.contains(&i) { f64::NEG_INFINITY } else { m }),
                );
                chosen.push(next);
                for (i, p) in points.iter().enumerate() {
                    nearest[i] = nearest[i].min(dist(p, &points[next]));
                }
            }
            Ok(chosen)
        }
        SubsetMode::NearestMedian => {
            let median: Vec<f64> = (0..d)
                .map(|j| {
                    let mut col: Vec<f64> = points.iter().map(|p| p[j]).collect();
                    col.sort_by(f64::total_cmp);
                    if n % 2 == 1 {
                        col[n / 2]
                    } else {
                        (col[n / 2 - 1] + col[n / 2]) / 2.0
                    }
                })
                .collect();
            let dists: Vec<f64> = points.iter().map(|p| dist(p, &median)).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
            order.truncate(k);
            Ok(order)
        }
    }
}

/// Smallest distance between two selected points; infinite below two points.
pub fn min_pairwise_distance(points: &[Vec<f64>], idx: &[usize]) -> f64 {
    let mut m = f64::INFINITY;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            m = m.min(dist(&points[i], &points[j]));
        }
    }
    m
}

/// Mean of the model's final-layer hidden states over the question tokens.
pub fn question_embedding(model: &LanguageModel, tokens: &[usize]) -> Result<Vec<f64>, LmError> {
    let mut dec = Decoder::new(model);
    let mut sum = vec![0.0f64; model.config.d_model];
    for &t in tokens {
        let s = dec.step(t)?;
        for (a, &h) in sum.iter_mut().zip(&s.hidden) {
            *a += h as f64;
        }
    }
    let n = tokens.len().max(1) as f64;
    Ok(sum.into_iter().map(|v| v / n).collect())
}
