//! Binary classification metrics: balanced accuracy, AUC, sensitivity and
//! specificity.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bacc: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub sen: f64,
    pub spe: f64,
    pub counts: ConfusionCounts,
}

pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// `(SEN + SPE) / 2`.
pub fn balanced_accuracy(sen: f64, spe: f64) -> f64 {
    (sen + spe) / 2.0
}

/// Exact pairwise concordance: the fraction of (positive, negative) pairs in
/// which the positive scores higher, counting ties as one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y != 1).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Undefined("AUC needs at least one positive and one negative".into()));
    }
    let mut credit = 0.0;
    for p in &pos {
        for n in &neg {
            credit += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(credit / (pos.len() * neg.len()) as f64)
}

/// Compute the full metric suite. SEN/SPE fall back to 0 when a class is
/// absent; AUC is then reported as `None`.
pub fn classification_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Metrics> {
    if scores.len() != labels.len() {
        return param_err(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return param_err("no samples");
    }
    let counts = confusion(scores, labels, threshold);
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let sen = ratio(counts.tp, counts.fn_);
    let spe = ratio(counts.tn, counts.fp);
    let auc = match auc(scores, labels) {
        Ok(v) => Some(v),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics { bacc: balanced_accuracy(sen, spe), auc, sen, spe, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Enumerate every (pos, neg) pair explicitly.
    fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn balanced_accuracy_of_reported_rates() {
        assert!((balanced_accuracy(0.63, 0.78) - 0.705).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_gives_unit_auc() {
        let m = classification_metrics(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!(m.auc, Some(1.0));
        assert_eq!(m.bacc, 1.0);
    }

    #[test]
    fn four_sample_hand_case() {
        let scores = [0.9, 0.8, 0.3, 0.2];
        let labels = [1, 0, 1, 0];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.75);
        assert_eq!(auc_oracle(&scores, &labels), 0.75);
        let m = classification_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!(m.counts, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!((m.sen, m.spe, m.bacc), (0.5, 0.5, 0.5));
    }

    #[test]
    fn single_class_leaves_auc_undefined() {
        assert!(matches!(auc(&[0.2, 0.4], &[1, 1]), Err(Error::Undefined(_))));
        let m = classification_metrics(&[0.2, 0.7], &[1, 1], 0.5).unwrap();
        assert_eq!(m.auc, None);
        assert_eq!(m.sen, 0.5);
        assert_eq!(m.counts.total(), 2);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_oracle(raw in proptest::collection::vec((0u8..6, 0u8..2), 2..=10)) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, y)| *y).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let got = auc(&scores, &labels).unwrap();
            prop_assert!((got - auc_oracle(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(raw in proptest::collection::vec((0.0f64..1.0, 0u8..2), 2..=12)) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, y)| *y).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&warped, &labels).unwrap());
        }

        #[test]
        fn bacc_invariant_under_reordering(raw in proptest::collection::vec((0.0f64..1.0, 0u8..2), 2..=12), rot in 0usize..12) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, y)| *y).collect();
            let k = rot % scores.len();
            let mut s2 = scores.clone();
            let mut l2 = labels.clone();
            s2.rotate_left(k);
            l2.rotate_left(k);
            let a = classification_metrics(&scores, &labels, 0.5).unwrap();
            let b = classification_metrics(&s2, &l2, 0.5).unwrap();
            prop_assert_eq!(a.bacc, b.bacc);
        }
    }
}
