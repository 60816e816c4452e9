//! Detection metrics: accuracy, ROC curve, and rank-statistic AUC.

use crate::error::{validation, Result};

/// Fraction of items where `score >= threshold` matches the label (1 = fake).
pub fn acc(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(validation(format!(
            "acc wants matching non-empty scores/labels, got {} and {}",
            scores.len(),
            labels.len()
        )));
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// AUC by the rank statistic (Mann-Whitney), ties counted half. Equivalent
/// to trapezoidal integration of the ROC curve.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(validation(
            "auc wants matching non-empty scores/labels".to_string(),
        ));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(validation(
            "auc undefined: both classes must be present".to_string(),
        ));
    }
    // ascending by score; average ranks across ties
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("scores must not be NaN")
    });
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // 1-based ranks
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&r, _)| r)
        .sum();
    Ok((rank_sum_pos - pos as f64 * (pos as f64 + 1.0) / 2.0) / (pos as f64 * neg as f64))
}

/// ROC curve points ordered from (0,0) to (1,1), one step per distinct
/// threshold (descending), plus the threshold list.
#[derive(Clone, Debug)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if scores.len() != labels.len() || pos == 0 || neg == 0 {
        return Err(validation("roc_curve needs both classes".to_string()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must not be NaN")
    });
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(threshold);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve { points, thresholds })
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn trapezoid_auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fmd_tensor::Rng;

    /// O(n^2) pairwise oracle: P(score_pos > score_neg), ties half.
    fn auc_pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                total += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / total
    }

    #[test]
    fn perfectly_separated_is_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn constant_scores_are_half() {
        let scores = [0.5; 6];
        let labels = [1, 0, 1, 0, 1, 0];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn matches_pairwise_oracle_on_random_sets() {
        let mut rng = Rng::new(40);
        for _ in 0..50 {
            let n = 20;
            // quantized scores so ties actually happen
            let scores: Vec<f64> = (0..n).map(|_| rng.below(8) as f64 / 8.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
            if labels.iter().all(|&l| l == 1) || labels.iter().all(|&l| l == 0) {
                continue;
            }
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_pairwise(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn invariant_under_monotone_transform() {
        let mut rng = Rng::new(41);
        let scores: Vec<f64> = (0..30).map(|_| rng.uniform(0.0, 1.0)).collect();
        let labels: Vec<u8> = (0..30).map(|_| rng.below(2) as u8).collect();
        let base = auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| (4.0 * s).exp() / 10.0).collect();
        assert!((auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(auc(&[0.1, 0.9], &[1, 1]).is_err());
        assert!(auc(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_threshold_semantics() {
        // score >= threshold counts as predicted fake
        let scores = [0.5, 0.49, 0.9, 0.1];
        let labels = [1, 1, 0, 0];
        assert_eq!(acc(&scores, &labels, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn roc_curve_endpoints_and_monotonicity() {
        let mut rng = Rng::new(42);
        for _ in 0..20 {
            let n = 16;
            let scores: Vec<f64> = (0..n).map(|_| rng.below(5) as f64 / 5.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let curve = roc_curve(&scores, &labels).unwrap();
            assert_eq!(curve.points.first(), Some(&(0.0, 0.0)));
            assert_eq!(curve.points.last(), Some(&(1.0, 1.0)));
            for w in curve.points.windows(2) {
                assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            // trapezoid integration agrees with the rank statistic
            let a = auc(&scores, &labels).unwrap();
            assert!((curve.trapezoid_auc() - a).abs() < 1e-12);
        }
    }
}
