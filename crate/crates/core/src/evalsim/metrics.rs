//! Ranking and exposure metrics.

use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney U over mid-ranks).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Argument(format!("score {s} is not comparable")));
    }
    let n_pos = labels.iter().filter(|l| **l == 1).count();
    let n_neg = labels.iter().filter(|l| **l == 0).count();
    if n_pos + n_neg != labels.len() {
        return Err(Error::Argument("labels must be 0 or 1".into()));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs at least one positive and one negative label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // mid-rank of the tie group, 1-based
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|k| labels[**k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Share of total exposure captured by the `ceil(top_fraction · n)` most
/// exposed items.
pub fn exposure_concentration(counts: &[f64], top_fraction: f64) -> Result<f64> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::Argument(format!("top_fraction must lie in (0, 1], got {top_fraction}")));
    }
    if counts.iter().any(|c| !(*c >= 0.0)) {
        return Err(Error::Argument("exposure counts must be >= 0".into()));
    }
    let total: f64 = counts.iter().sum();
    if counts.is_empty() || total <= 0.0 {
        return Err(Error::UndefinedMetric("exposure share of an all-zero count vector".into()));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let take = ((top_fraction * counts.len() as f64).ceil() as usize).clamp(1, counts.len());
    Ok(sorted[..take].iter().sum::<f64>() / total)
}

/// `|top-K ∩ relevant| / min(K, |relevant|)`.
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("recall@K needs K >= 1".into()));
    }
    if relevant.is_empty() {
        return Err(Error::UndefinedMetric("recall with an empty relevant set".into()));
    }
    let mut rel = relevant.to_vec();
    rel.sort_unstable();
    rel.dedup();
    let hits = ranked.iter().take(k).filter(|r| rel.binary_search(r).is_ok()).count();
    Ok(hits as f64 / k.min(rel.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(auc(&[0.1, 0.2], &[1, 2]).is_err());
    }

    #[test]
    fn concentration_examples() {
        assert!((exposure_concentration(&[1.0; 100], 0.01).unwrap() - 0.01).abs() < 1e-15);
        let mut one = vec![0.0; 100];
        one[37] = 5.0;
        assert_eq!(exposure_concentration(&one, 0.01).unwrap(), 1.0);
        assert!((exposure_concentration(&[70.0, 10.0, 10.0, 10.0], 0.25).unwrap() - 0.7).abs() < 1e-15);
        // fewer than 100 items: still one item
        assert!((exposure_concentration(&[3.0, 1.0], 0.01).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(exposure_concentration(&[0.0, 0.0], 0.5), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[4, 1, 2], &[4], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[0, 1, 2, 9], &[9], 3).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[5, 3, 8, 1], &[3, 1], 3).unwrap(), 0.5);
        assert!(matches!(recall_at_k(&[1], &[], 1), Err(Error::UndefinedMetric(_))));
    }
}
