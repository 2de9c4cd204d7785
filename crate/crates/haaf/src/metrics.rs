//! Binary classification metrics: F1 at a fixed threshold and ROC AUC in
//! its rank-sum (Mann-Whitney) form, ties counted half.

use serde::Serialize;
use thiserror::Error;

use crate::tensor::Real;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("labels and scores have different lengths ({labels} vs {scores})")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("AUC undefined: only one class present")]
    OneClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn confusion(
    labels: &[u8],
    probabilities: &[Real],
    threshold: Real,
) -> Result<Confusion, MetricsError> {
    validate(labels, probabilities)?;
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&y, &p) in labels.iter().zip(probabilities) {
        // Probability equal to the threshold classifies as positive.
        let positive = p >= threshold;
        match (y == 1, positive) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// F1 = 2PR / (P + R), defined as 0 when precision + recall is 0.
pub fn f1_score(
    labels: &[u8],
    probabilities: &[Real],
    threshold: Real,
) -> Result<Real, MetricsError> {
    let c = confusion(labels, probabilities, threshold)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * c.tp as Real / denom as Real)
}

/// ROC AUC: the probability that a random positive outscores a random
/// negative, ties counted 1/2. Computed from average ranks; equals the
/// pairwise definition exactly.
pub fn auc_score(labels: &[u8], scores: &[Real]) -> Result<Real, MetricsError> {
    validate(labels, scores)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::OneClass);
    }

    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks over tie groups; ranks are 1-based.
    let mut pos_rank_sum = 0.0 as Real;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as Real / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                pos_rank_sum += avg_rank;
            }
        }
        i = j;
    }

    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as Real / 2.0;
    Ok(u / (n_pos as Real * n_neg as Real))
}

/// One bag's evaluation record.
#[derive(Debug, Clone, Serialize)]
pub struct BagScore {
    pub bag_id: String,
    pub label: u8,
    pub logit: Real,
    pub probability: Real,
}

/// Metrics for one test fold, F1 at the fixed threshold plus AUC (which can
/// be undefined when a class is absent; the error is carried, not fatal).
#[derive(Debug, Clone, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub f1: Real,
    pub auc: Option<Real>,
    pub auc_error: Option<String>,
    pub confusion: Confusion,
    pub threshold: Real,
    pub scores: Vec<BagScore>,
}

impl FoldReport {
    pub fn from_scores(fold: usize, scores: Vec<BagScore>, threshold: Real) -> Self {
        let labels: Vec<u8> = scores.iter().map(|s| s.label).collect();
        let probs: Vec<Real> = scores.iter().map(|s| s.probability).collect();
        let confusion = confusion(&labels, &probs, threshold).unwrap_or(Confusion {
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
        });
        let f1 = f1_score(&labels, &probs, threshold).unwrap_or(0.0);
        let (auc, auc_error) = match auc_score(&labels, &probs) {
            Ok(a) => (Some(a), None),
            Err(e) => (None, Some(e.to_string())),
        };
        FoldReport { fold, f1, auc, auc_error, confusion, threshold, scores }
    }
}

/// Aggregate over folds; AUC statistics are reported only when every fold
/// had a defined AUC.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub folds: Vec<FoldReport>,
    pub mean_f1: Real,
    pub std_f1: Real,
    pub mean_auc: Option<Real>,
    pub std_auc: Option<Real>,
}

impl EvalReport {
    pub fn from_folds(folds: Vec<FoldReport>) -> Self {
        let f1s: Vec<Real> = folds.iter().map(|f| f.f1).collect();
        let (mean_f1, std_f1) = mean_std(&f1s);
        let aucs: Option<Vec<Real>> = folds.iter().map(|f| f.auc).collect();
        let (mean_auc, std_auc) = match aucs {
            Some(a) if !a.is_empty() => {
                let (m, s) = mean_std(&a);
                (Some(m), Some(s))
            }
            _ => (None, None),
        };
        EvalReport { folds, mean_f1, std_f1, mean_auc, std_auc }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[Real]) -> (Real, Real) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as Real;
    let mean = values.iter().sum::<Real>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
    (mean, var.sqrt())
}

fn validate(labels: &[u8], scores: &[Real]) -> Result<(), MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    if labels.len() != scores.len() {
        return Err(MetricsError::LengthMismatch { labels: labels.len(), scores: scores.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(MetricsError::BadLabel(bad));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n^2) AUC oracle straight from the definition.
    fn auc_pairwise(labels: &[u8], scores: &[Real]) -> Real {
        let mut wins = 0.0 as Real;
        let mut pairs = 0.0 as Real;
        for (i, &yi) in labels.iter().enumerate() {
            if yi != 1 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = [1, 1, 0, 0];
        let probs = [0.9, 0.8, 0.3, 0.2];
        assert_eq!(f1_score(&labels, &probs, 0.5).unwrap(), 1.0);
        assert_eq!(auc_score(&labels, &probs).unwrap(), 1.0);
    }

    #[test]
    fn f1_hand_case() {
        // TP=2, FP=1, FN=1 -> P = R = 2/3 -> F1 = 2/3.
        let labels = [1, 1, 1, 0, 0];
        let probs = [0.9, 0.8, 0.1, 0.7, 0.2];
        let f1 = f1_score(&labels, &probs, 0.5).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_negative_predictions_give_zero_f1() {
        let labels = [1, 0, 1];
        let probs = [0.1, 0.2, 0.3];
        assert_eq!(f1_score(&labels, &probs, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn threshold_tie_counts_as_positive() {
        let labels = [1];
        let probs = [0.5];
        assert_eq!(f1_score(&labels, &probs, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn auc_hand_case() {
        // pairs: (0.9,0.2) win, (0.9,0.8) win, (0.3,0.2) win, (0.3,0.8) loss.
        let labels = [1, 0, 0, 1];
        let scores = [0.9, 0.2, 0.8, 0.3];
        assert_eq!(auc_score(&labels, &scores).unwrap(), 0.75);
    }

    #[test]
    fn all_ties_give_half() {
        let labels = [1, 0, 1, 0];
        let scores = [0.4, 0.4, 0.4, 0.4];
        assert_eq!(auc_score(&labels, &scores).unwrap(), 0.5);
    }

    #[test]
    fn auc_equals_pairwise_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..500 {
            let n = rng.random_range(2..40);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            // Guarantee both classes.
            labels[0] = 1;
            labels[1] = 0;
            // Coarse grid so ties actually happen.
            let scores: Vec<Real> =
                (0..n).map(|_| (rng.random_range(0..10) as Real) / 10.0).collect();
            let fast = auc_score(&labels, &scores).unwrap();
            let slow = auc_pairwise(&labels, &scores);
            assert_eq!(fast, slow, "case {case}: {fast} != {slow}");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.random_range(3..30);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let scores: Vec<Real> = (0..n).map(|_| rng.random::<f64>() as Real).collect();
            let base = auc_score(&labels, &scores).unwrap();
            let squashed: Vec<Real> = scores.iter().map(|&s| crate::tensor::sigmoid(s)).collect();
            let scaled: Vec<Real> = scores.iter().map(|&s| 3.0 * s + 11.0).collect();
            assert_eq!(base, auc_score(&labels, &squashed).unwrap());
            assert_eq!(base, auc_score(&labels, &scaled).unwrap());
        }
    }

    #[test]
    fn f1_is_monotone_in_tp() {
        // Fixed FP = 1, FN = 1; growing TP must not decrease F1.
        let mut last = 0.0;
        for tp in 0..10usize {
            let mut labels = vec![0u8];
            let mut probs = vec![0.9 as Real]; // FP
            labels.push(1);
            probs.push(0.1); // FN
            for _ in 0..tp {
                labels.push(1);
                probs.push(0.9);
            }
            let f1 = f1_score(&labels, &probs, 0.5).unwrap();
            assert!(f1 >= last, "tp={tp}: {f1} < {last}");
            last = f1;
        }
    }

    #[test]
    fn random_scores_hover_around_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut total = 0.0 as Real;
        let trials = 1000;
        for _ in 0..trials {
            let n = 40;
            let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            let scores: Vec<Real> = (0..n).map(|_| rng.random::<f64>() as Real).collect();
            total += auc_score(&labels, &scores).unwrap();
        }
        let mean = total / trials as Real;
        assert!((mean - 0.5).abs() < 0.02, "mean AUC {mean}");
    }

    #[test]
    fn error_cases() {
        assert_eq!(f1_score(&[], &[], 0.5).unwrap_err(), MetricsError::Empty);
        assert_eq!(auc_score(&[1, 1], &[0.1, 0.2]).unwrap_err(), MetricsError::OneClass);
        assert_eq!(
            auc_score(&[1, 0], &[0.1]).unwrap_err(),
            MetricsError::LengthMismatch { labels: 2, scores: 1 }
        );
        assert_eq!(f1_score(&[2, 0], &[0.1, 0.2], 0.5).unwrap_err(), MetricsError::BadLabel(2));
    }
}
