use super::EvalError;

/// Average precision with `true` as the positive class and higher scores
/// ranked first. Tied scores form one threshold block.
pub fn pr_auc(labels: &[bool], scores: &[f64]) -> Result<f64, EvalError> {
    if labels.len() != scores.len() {
        return Err(EvalError::LengthMismatch {
            left: labels.len(),
            right: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(EvalError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Fraction of positions where two label vectors agree.
pub fn judge_agreement(judge: &[bool], oracle: &[bool]) -> Result<f64, EvalError> {
    if judge.len() != oracle.len() {
        return Err(EvalError::LengthMismatch {
            left: judge.len(),
            right: oracle.len(),
        });
    }
    if judge.is_empty() {
        return Err(EvalError::Empty);
    }
    let same = judge.iter().zip(oracle).filter(|(a, b)| a == b).count();
    Ok(same as f64 / judge.len() as f64)
}

/// Fraction of `true` entries.
pub fn prevalence(labels: &[bool]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64
}
