use serde::{Deserialize, Serialize};

use crate::error::{Result, SemcError};

/// Classification quality in percent, macro-averaged over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    /// Builds the report from predicted and true labels. Classes with no
    /// predictions (or no support) score zero precision (or recall).
    pub fn from_predictions(
        predicted: &[usize],
        truth: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if truth.is_empty() {
            return Err(SemcError::Data("cannot evaluate an empty split".into()));
        }
        if predicted.len() != truth.len() {
            return Err(SemcError::Data(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= num_classes || t >= num_classes {
                return Err(SemcError::Data(format!(
                    "label pair ({t}, {p}) outside [0,{num_classes})"
                )));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
        for c in 0..num_classes {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
            let p = ratio(tp, predicted_c);
            let r = ratio(tp, support);
            let f = if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            };
            p_sum += p;
            r_sum += r;
            f_sum += f;
        }
        let k = num_classes as f64;
        Ok(Self {
            accuracy: 100.0 * correct as f64 / truth.len() as f64,
            precision: 100.0 * p_sum / k,
            recall: 100.0 * r_sum / k,
            f1: 100.0 * f_sum / k,
            confusion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let m = MetricsReport::from_predictions(&y, &y, 3).unwrap();
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (100.0, 100.0, 100.0, 100.0)
        );
    }

    #[test]
    fn constant_predictor_on_balanced_pair() {
        let m = MetricsReport::from_predictions(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((m.accuracy - 50.0).abs() < 1e-12);
        assert!((m.f1 - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.confusion, vec![vec![2, 0], vec![2, 0]]);
    }

    #[test]
    fn empty_split_rejected() {
        assert!(matches!(
            MetricsReport::from_predictions(&[], &[], 2),
            Err(SemcError::Data(_))
        ));
    }

    #[test]
    fn confusion_rows_sum_to_support() {
        let t = [0, 1, 1, 2, 2, 2];
        let p = [1, 1, 0, 2, 0, 2];
        let m = MetricsReport::from_predictions(&p, &t, 3).unwrap();
        let rows: Vec<usize> = m.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(rows, vec![1, 2, 3]);
    }
}
