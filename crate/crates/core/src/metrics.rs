//! Confusion matrices and the evaluation metric suite.
//!
//! Rows of a [`ConfusionMatrix`] are actual classes, columns are predicted
//! classes. The Matthews correlation coefficient uses the standard binary
//! formula on 2×2 matrices and Gorodkin's R_K generalization otherwise; both
//! agree on 2×2 inputs.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("label {label} is not one of the {n_classes} classes")]
    UnknownLabel { label: usize, n_classes: usize },
    #[error("prediction and truth lengths differ ({truth} vs {pred})")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("confusion matrix must be square with at least one class")]
    NotSquare,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: Vec<String>) -> Self {
        let k = classes.len();
        Self { classes, counts: vec![vec![0; k]; k] }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        if classes.is_empty()
            || counts.len() != classes.len()
            || counts.iter().any(|row| row.len() != classes.len())
        {
            return Err(MetricsError::NotSquare);
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn add(&mut self, actual: usize, predicted: usize) {
        self.counts[actual][predicted] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, other_row) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(other_row) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|k| self.counts[k][k]).sum()
    }

    /// Row sums (true class supports).
    pub fn actual_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    /// Column sums (predicted class totals).
    pub fn predicted_totals(&self) -> Vec<u64> {
        (0..self.n_classes())
            .map(|p| self.counts.iter().map(|row| row[p]).sum())
            .collect()
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .classes
            .iter()
            .map(String::len)
            .chain(self.counts.iter().flatten().map(|c| c.to_string().len()))
            .max()
            .unwrap_or(1)
            .max(6);
        write!(f, "{:>width$}", "actual\\pred")?;
        for c in &self.classes {
            write!(f, " {c:>width$}")?;
        }
        writeln!(f)?;
        for (name, row) in self.classes.iter().zip(&self.counts) {
            write!(f, "{name:>width$}")?;
            for c in row {
                write!(f, " {c:>width$}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Tallies `counts[actual][predicted]`.
pub fn confusion(
    y_true: &[usize],
    y_pred: &[usize],
    classes: &[String],
) -> Result<ConfusionMatrix, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch { truth: y_true.len(), pred: y_pred.len() });
    }
    if classes.is_empty() {
        return Err(MetricsError::NotSquare);
    }
    let n_classes = classes.len();
    let mut cm = ConfusionMatrix::zeros(classes.to_vec());
    for (&a, &p) in y_true.iter().zip(y_pred) {
        for label in [a, p] {
            if label >= n_classes {
                return Err(MetricsError::UnknownLabel { label, n_classes });
            }
        }
        cm.add(a, p);
    }
    Ok(cm)
}

/// Matthews correlation coefficient. Degenerate denominators yield 0.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    if cm.n_classes() == 2 {
        binary_mcc(cm)
    } else {
        rk_mcc(cm)
    }
}

fn binary_mcc(cm: &ConfusionMatrix) -> f64 {
    let c = cm.counts();
    let (tn, fp) = (c[0][0] as f64, c[0][1] as f64);
    let (fn_, tp) = (c[1][0] as f64, c[1][1] as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        log::warn!("MCC denominator is zero; reporting 0");
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom.sqrt()
}

/// Gorodkin's R_K statistic over a K×K matrix.
fn rk_mcc(cm: &ConfusionMatrix) -> f64 {
    let s = cm.total() as f64;
    let c = cm.trace() as f64;
    let t = cm.actual_totals();
    let p = cm.predicted_totals();
    let pt: f64 = t.iter().zip(&p).map(|(&t, &p)| t as f64 * p as f64).sum();
    let pp: f64 = p.iter().map(|&p| (p as f64).powi(2)).sum();
    let tt: f64 = t.iter().map(|&t| (t as f64).powi(2)).sum();
    let denom = (s * s - pp) * (s * s - tt);
    if denom <= 0.0 {
        log::warn!("MCC denominator is zero; reporting 0");
        return 0.0;
    }
    (c * s - pt) / denom.sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSuite {
    pub mcc: f64,
    pub accuracy: f64,
    pub f1_weighted: f64,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub cohens_kappa: f64,
}

impl MetricSuite {
    pub const NAMES: [&'static str; 6] = [
        "MCC",
        "Accuracy",
        "F1-Score (weighted)",
        "Precision (weighted)",
        "Recall (weighted)",
        "Cohen's Kappa",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.mcc,
            self.accuracy,
            self.f1_weighted,
            self.precision_weighted,
            self.recall_weighted,
            self.cohens_kappa,
        ]
    }
}

pub fn suite(cm: &ConfusionMatrix) -> Result<MetricSuite, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let n = total as f64;
    let support = cm.actual_totals();
    let predicted = cm.predicted_totals();

    let mut precision_w = 0.0;
    let mut recall_w = 0.0;
    let mut f1_w = 0.0;
    for k in 0..cm.n_classes() {
        let tp = cm.counts()[k][k] as f64;
        let precision = ratio_or_zero(tp, predicted[k] as f64);
        let recall = ratio_or_zero(tp, support[k] as f64);
        let f1 = ratio_or_zero(2.0 * precision * recall, precision + recall);
        let weight = support[k] as f64 / n;
        precision_w += weight * precision;
        recall_w += weight * recall;
        f1_w += weight * f1;
    }

    let accuracy = cm.trace() as f64 / n;
    let expected: f64 = support
        .iter()
        .zip(&predicted)
        .map(|(&a, &p)| (a as f64 / n) * (p as f64 / n))
        .sum();
    let cohens_kappa = if (1.0 - expected).abs() < f64::EPSILON {
        log::warn!("Cohen's kappa denominator is zero; reporting 0");
        0.0
    } else {
        (accuracy - expected) / (1.0 - expected)
    };

    Ok(MetricSuite {
        mcc: mcc(cm),
        accuracy,
        f1_weighted: f1_w,
        precision_weighted: precision_w,
        recall_weighted: recall_w,
        cohens_kappa,
    })
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary() -> Vec<String> {
        vec!["no scrap".into(), "scrap".into()]
    }

    fn cm2(c: [[u64; 2]; 2]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(binary(), c.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn diagonal_confusion() {
        let cm = confusion(&[0, 1], &[0, 1], &binary()).unwrap();
        assert_eq!(cm.counts(), &[vec![1, 0], vec![0, 1]]);
    }

    #[test]
    fn confusion_rejects_unknown_label() {
        let err = confusion(&[0, 2], &[0, 1], &binary()).unwrap_err();
        assert_eq!(err, MetricsError::UnknownLabel { label: 2, n_classes: 2 });
    }

    #[test]
    fn confusion_matches_tally() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let classes: Vec<String> = (0..3).map(|k| k.to_string()).collect();
        let truth: Vec<usize> = (0..100).map(|_| rng.random_range(0..3)).collect();
        let pred: Vec<usize> = (0..100).map(|_| rng.random_range(0..3)).collect();
        let cm = confusion(&truth, &pred, &classes).unwrap();
        for a in 0..3 {
            for p in 0..3 {
                let tally = truth.iter().zip(&pred).filter(|&(&t, &q)| t == a && q == p).count();
                assert_eq!(cm.counts()[a][p], tally as u64);
            }
        }
    }

    #[test]
    fn published_binary_values() {
        let complete = suite(&cm2([[1180766, 2981], [5177, 1702]])).unwrap();
        assert!((complete.mcc - 0.296544).abs() < 1e-6);
        assert!((complete.accuracy - 0.993148).abs() < 1e-6);
        assert!((complete.f1_weighted - 0.992501).abs() < 1e-6);
        assert!((complete.precision_weighted - 0.991982).abs() < 1e-6);
        assert!((complete.recall_weighted - 0.993148).abs() < 1e-6);
        assert!((complete.cohens_kappa - 0.291095).abs() < 1e-6);

        let meta = cm2([[1180558, 3189], [5231, 1648]]);
        assert!((mcc(&meta) - 0.282242).abs() < 1e-6);

        let sub0 = suite(&cm2([[1175324, 8423], [5221, 1658]])).unwrap();
        assert!((sub0.mcc - 0.193483).abs() < 1e-6);
        assert!((sub0.cohens_kappa - 0.189955).abs() < 1e-6);
    }

    #[test]
    fn published_three_class_value() {
        let classes = vec!["no failure".into(), "assembly failure".into(), "damage".into()];
        let cm = ConfusionMatrix::from_counts(
            classes,
            vec![
                vec![1048299, 16513, 12980],
                vec![10170, 562431, 9687],
                vec![5490, 9841, 553349],
            ],
        )
        .unwrap();
        assert!((mcc(&cm) - 0.954285).abs() < 1e-6);
    }

    #[test]
    fn identity_scores_one() {
        let s = suite(&cm2([[1, 0], [0, 1]])).unwrap();
        for v in s.values() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn degenerate_is_zero() {
        let cm = cm2([[5, 0], [3, 0]]);
        assert_eq!(mcc(&cm), 0.0);
        assert_eq!(suite(&cm).unwrap().cohens_kappa, 0.0);
    }

    #[test]
    fn empty_suite_errors() {
        assert_eq!(suite(&cm2([[0, 0], [0, 0]])).unwrap_err(), MetricsError::Empty);
    }

    fn small_matrix(k: usize) -> impl Strategy<Value = Vec<Vec<u64>>> {
        proptest::collection::vec(proptest::collection::vec(0u64..50, k), k)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rk_equals_binary_formula(counts in small_matrix(2)) {
            let cm = ConfusionMatrix::from_counts(binary(), counts).unwrap();
            prop_assert!((rk_mcc(&cm) - binary_mcc(&cm)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn mcc_invariant_under_class_permutation(counts in small_matrix(3), perm in Just([2usize, 0, 1])) {
            let classes: Vec<String> = (0..3).map(|k| k.to_string()).collect();
            let cm = ConfusionMatrix::from_counts(classes.clone(), counts.clone()).unwrap();
            let permuted: Vec<Vec<u64>> = (0..3)
                .map(|a| (0..3).map(|p| counts[perm[a]][perm[p]]).collect())
                .collect();
            let pm = ConfusionMatrix::from_counts(classes, permuted).unwrap();
            prop_assert!((mcc(&cm) - mcc(&pm)).abs() < 1e-12);
        }

        #[test]
        fn swapping_binary_prediction_columns_negates(counts in small_matrix(2)) {
            let cm = ConfusionMatrix::from_counts(binary(), counts.clone()).unwrap();
            let swapped: Vec<Vec<u64>> = counts.iter().map(|r| vec![r[1], r[0]]).collect();
            let sm = ConfusionMatrix::from_counts(binary(), swapped).unwrap();
            prop_assert!((mcc(&cm) + mcc(&sm)).abs() < 1e-12);
        }

        #[test]
        fn accuracy_equals_weighted_recall(counts in small_matrix(3)) {
            let classes: Vec<String> = (0..3).map(|k| k.to_string()).collect();
            let cm = ConfusionMatrix::from_counts(classes, counts).unwrap();
            if cm.total() > 0 {
                let s = suite(&cm).unwrap();
                prop_assert!((s.accuracy - s.recall_weighted).abs() < 1e-12);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s.mcc));
                for v in [s.accuracy, s.f1_weighted, s.precision_weighted] {
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
                }
            }
        }
    }
}
