use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square count matrix; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|r| r.len() != c) {
            return Err(Error::InvalidArgument(format!(
                "confusion matrix must be square, got {c} rows"
            )));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::InvalidArgument(format!(
                    "class index out of range 0..{classes}"
                )));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|c| self.counts[c][c]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub kappa: f64,
    /// Set when chance agreement is 1 and kappa was reported as 0.
    pub kappa_undefined: bool,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, Cohen's kappa, and precision/recall: for the positive class
/// (index 1) in binary problems, macro-averaged otherwise. Precision or
/// recall with a zero denominator counts as 0.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyConfusion);
    }
    let c = cm.classes();
    let n = total as f64;
    let accuracy = cm.trace() as f64 / n;

    let per_class = |k: usize| {
        (
            ratio(cm.get(k, k), cm.col_sum(k)),
            ratio(cm.get(k, k), cm.row_sum(k)),
        )
    };
    let (precision, recall) = match c {
        1 => per_class(0),
        2 => per_class(1),
        _ => {
            let (p, r) = (0..c)
                .map(per_class)
                .fold((0.0, 0.0), |(a, b), (p, r)| (a + p, b + r));
            (p / c as f64, r / c as f64)
        }
    };

    let p_e: f64 = (0..c)
        .map(|k| cm.row_sum(k) as f64 * cm.col_sum(k) as f64)
        .sum::<f64>()
        / (n * n);
    let (kappa, kappa_undefined) = if p_e >= 1.0 {
        (0.0, true)
    } else {
        ((accuracy - p_e) / (1.0 - p_e), false)
    };
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        kappa,
        kappa_undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn two_by_two_example() {
        let m = metrics(&cm(&[&[2, 1], &[1, 2]])).unwrap();
        for v in [m.accuracy, m.precision, m.recall] {
            assert!((v - 0.6667).abs() < 1e-4);
        }
        assert!((m.kappa - 0.3333).abs() < 1e-4);
    }

    #[test]
    fn perfect_diagonal() {
        let m = metrics(&cm(&[&[5, 0, 0], &[0, 3, 0], &[0, 0, 4]])).unwrap();
        assert_eq!(
            (m.accuracy, m.kappa, m.precision, m.recall),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn constant_prediction_has_zero_kappa() {
        let m = metrics(&cm(&[&[5, 0], &[5, 0]])).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.kappa, 0.0);
        assert_eq!((m.precision, m.recall), (0.0, 0.0));
        assert!(!m.kappa_undefined);
    }

    #[test]
    fn single_class_agreement_flags_kappa() {
        let m = metrics(&cm(&[&[4, 0], &[0, 0]])).unwrap();
        assert_eq!(m.kappa, 0.0);
        assert!(m.kappa_undefined);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(matches!(
            metrics(&cm(&[&[0, 0], &[0, 0]])),
            Err(Error::EmptyConfusion)
        ));
        assert!(ConfusionMatrix::new(vec![vec![1, 2]]).is_err());
    }

    #[test]
    fn from_predictions_counts() {
        let m = ConfusionMatrix::from_predictions(&[0, 1, 1, 0], &[0, 1, 0, 0], 2).unwrap();
        assert_eq!(m, cm(&[&[2, 0], &[1, 1]]));
    }
}
