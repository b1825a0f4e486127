use crate::error::{Error, Result};

/// Mann-Whitney AUC; each tied positive-negative pair counts one half.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of average ranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of samples with `(score >= threshold) == label`.
pub fn compute_acc(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}
