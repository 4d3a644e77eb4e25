//! Binary-outcome evaluation metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("labels contain a single class")]
    SingleClass,
    #[error("labels contain no positives")]
    NoPositives,
    #[error("empty input")]
    EmptyInput,
    #[error("labels must be 0 or 1")]
    InvalidLabel,
    #[error("scores must be finite")]
    NonFiniteScore,
}

fn check<F: Scalar>(scores: &[F], labels: &[u8]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(MetricError::InvalidLabel);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore);
    }
    Ok(())
}

fn by_score_desc<F: Scalar>(scores: &[F]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable, so equal scores keep input order.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// Area under the ROC curve as the Mann-Whitney statistic:
/// `(concordant + 0.5 * tied) / (positives * negatives)` over all positive/negative pairs.
pub fn auroc<F: Scalar>(scores: &[F], labels: &[u8]) -> Result<f64, MetricError> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass);
    }
    let order = by_score_desc(scores);
    // Twice the pair credit, kept integral until the final division.
    let mut doubled: u64 = 0;
    let mut negatives_above: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        // Positives in this tie group beat every negative below the group.
        let below = negatives - negatives_above - neg;
        doubled += 2 * pos * below + pos * neg;
        negatives_above += neg;
        i = j;
    }
    Ok(doubled as f64 / (2 * positives * negatives) as f64)
}

/// Average precision: mean over positives of the precision at each positive's rank, ranks
/// taken from a stable descending sort (ties keep input order).
pub fn auprc<F: Scalar>(scores: &[F], labels: &[u8]) -> Result<f64, MetricError> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in by_score_desc(scores).iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Mean squared error of predicted probabilities.
pub fn brier<F: Scalar>(scores: &[F], labels: &[u8]) -> Result<f64, MetricError> {
    check(scores, labels)?;
    if scores.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let sum: f64 = scores
        .iter()
        .zip(labels)
        .map(|(s, &l)| {
            let d = s.as_f64() - f64::from(l);
            d * d
        })
        .sum();
    Ok(sum / scores.len() as f64)
}

/// Fraction of rows where `score >= threshold` agrees with the label.
pub fn accuracy<F: Scalar>(scores: &[F], labels: &[u8], threshold: F) -> Result<f64, MetricError> {
    check(scores, labels)?;
    if scores.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| (**s >= threshold) == (l == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when the split holds a single class.
    pub auroc: Option<f64>,
    /// `None` when the split holds no positives.
    pub auprc: Option<f64>,
    pub brier: f64,
    pub accuracy_at_0_5: f64,
    pub n: usize,
    pub split_name: String,
}

impl EvalReport {
    pub fn compute<F: Scalar>(
        scores: &[F],
        labels: &[u8],
        split_name: &str,
    ) -> Result<Self, MetricError> {
        Ok(Self {
            auroc: auroc(scores, labels).ok(),
            auprc: auprc(scores, labels).ok(),
            brier: brier(scores, labels)?,
            accuracy_at_0_5: accuracy(scores, labels, F::lit(0.5))?,
            n: scores.len(),
            split_name: split_name.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3f32; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.2, 0.3], &[1, 1]), Err(MetricError::SingleClass));
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1]).unwrap(), 0.25);
        assert_eq!(auprc(&[0.9, 0.8], &[0, 0]), Err(MetricError::NoPositives));
        // Ties resolve in input order: the positive at index 1 ranks second.
        assert_eq!(auprc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&[1.0, 0.0], &[1, 0]).unwrap(), 0.0);
        assert_eq!(brier(&[0.5; 4], &[1, 0, 0, 1]).unwrap(), 0.25);
        assert!((brier(&[0.2, 0.7], &[0, 1]).unwrap() - 0.065).abs() < 1e-15);
        assert_eq!(brier::<f64>(&[], &[]), Err(MetricError::EmptyInput));
    }

    #[test]
    fn input_checks() {
        assert!(matches!(
            auroc(&[0.1], &[1, 0]),
            Err(MetricError::LengthMismatch { .. })
        ));
        assert_eq!(auroc(&[0.1, 0.2], &[2, 0]), Err(MetricError::InvalidLabel));
        assert_eq!(
            auroc(&[f64::NAN, 0.2], &[1, 0]),
            Err(MetricError::NonFiniteScore)
        );
    }

    #[test]
    fn report_handles_single_class() {
        let r = EvalReport::compute(&[0.2, 0.9], &[0, 0], "test").unwrap();
        assert_eq!(r.auroc, None);
        assert_eq!(r.auprc, None);
        assert_eq!(r.accuracy_at_0_5, 0.5);
    }
}
