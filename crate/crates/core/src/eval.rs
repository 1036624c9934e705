//! Confusion-matrix metrics with macro averaging, and fold aggregation.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{truth} true labels but {predicted} predictions")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("no folds to aggregate")]
    EmptyInput,
}

/// `counts[t][p]` = number of samples with true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..self.num_classes())
            .filter(|&t| t != class)
            .map(|t| self.counts[t][class])
            .sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..self.num_classes())
            .filter(|&p| p != class)
            .map(|p| self.counts[class][p])
            .sum()
    }
}

pub fn confusion(
    y_true: &[usize],
    y_pred: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch {
            truth: y_true.len(),
            predicted: y_pred.len(),
        });
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if let Some(&label) = [t, p].iter().find(|&&l| l >= classes) {
            return Err(EvalError::LabelOutOfRange { label, classes });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Correct predictions over all predictions (the matrix trace over its
/// total).
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    Ok(cm.trace() as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a ratio was 0/0 and recorded as 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    /// Mean of the per-class F1 scores.
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

/// Unweighted per-class averages. Any 0/0 ratio counts as 0 and sets the
/// class's `undefined` flag.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MacroMetrics, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let per_class: Vec<ClassMetrics> = (0..cm.num_classes())
        .map(|c| {
            let tp = cm.true_positives(c) as f64;
            let (precision, u1) = ratio(tp, tp + cm.false_positives(c) as f64);
            let (recall, u2) = ratio(tp, tp + cm.false_negatives(c) as f64);
            let (f1, u3) = ratio(2.0 * precision * recall, precision + recall);
            ClassMetrics {
                precision,
                recall,
                f1,
                undefined: u1 || u2 || u3,
            }
        })
        .collect();
    let n = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    Ok(MacroMetrics {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        per_class,
    })
}

/// Headline metrics for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl Metrics {
    fn as_array(&self) -> [f64; 4] {
        [
            self.accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
        ]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Metrics {
            accuracy: a[0],
            macro_precision: a[1],
            macro_recall: a[2],
            macro_f1: a[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub undefined_ratios: bool,
}

pub fn evaluate(
    y_true: &[usize],
    y_pred: &[usize],
    classes: usize,
) -> Result<MetricsReport, EvalError> {
    let cm = confusion(y_true, y_pred, classes)?;
    let acc = accuracy(&cm)?;
    let m = macro_metrics(&cm)?;
    Ok(MetricsReport {
        metrics: Metrics {
            accuracy: acc,
            macro_precision: m.precision,
            macro_recall: m.recall,
            macro_f1: m.f1,
        },
        undefined_ratios: m.per_class.iter().any(|c| c.undefined),
        per_class: m.per_class,
        confusion: cm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<MetricsReport>,
    pub mean: Metrics,
    /// Sample standard deviation across folds.
    pub std: Metrics,
    /// Set when only one fold was given and `std` is reported as 0.
    pub single_fold: bool,
}

pub fn cv_aggregate(folds: &[MetricsReport]) -> Result<CvSummary, EvalError> {
    if folds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = folds.len() as f64;
    let values: Vec<[f64; 4]> = folds.iter().map(|f| f.metrics.as_array()).collect();
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    for k in 0..4 {
        let first = values[0][k];
        mean[k] = if values.iter().all(|v| v[k] == first) {
            first
        } else {
            values.iter().map(|v| v[k]).sum::<f64>() / n
        };
        if folds.len() > 1 {
            let ss: f64 = values.iter().map(|v| (v[k] - mean[k]).powi(2)).sum();
            std[k] = (ss / (n - 1.0)).sqrt();
        }
    }
    Ok(CvSummary {
        folds: folds.to_vec(),
        mean: Metrics::from_array(mean),
        std: Metrics::from_array(std),
        single_fold: folds.len() == 1,
    })
}

/// Plain-text table with one `mean ± std` row.
pub fn summary_table(model_name: &str, summary: &CvSummary) -> String {
    let mut out = String::new();
    let header = ["Model", "Accuracy", "Precision", "Recall", "F1-score"];
    let cells: Vec<String> = summary
        .mean
        .as_array()
        .iter()
        .zip(summary.std.as_array())
        .map(|(m, s)| format!("{m:.4} ± {s:.4}"))
        .collect();
    let name_width = model_name.chars().count().max(5);
    let _ = write!(out, "{:<name_width$}", header[0]);
    for h in &header[1..] {
        let _ = write!(out, " | {h:<17}");
    }
    out.push('\n');
    let _ = write!(out, "{model_name:<name_width$}");
    for c in &cells {
        let _ = write!(out, " | {c:<17}");
    }
    out.push('\n');
    for (i, f) in summary.folds.iter().enumerate() {
        let _ = writeln!(
            out,
            "fold {i}: accuracy {:.4}, precision {:.4}, recall {:.4}, f1 {:.4}",
            f.metrics.accuracy, f.metrics.macro_precision, f.metrics.macro_recall, f.metrics.macro_f1
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_example() {
        let cm = confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
        assert_eq!(accuracy(&cm).unwrap(), 2.0 / 3.0);
        let m = macro_metrics(&cm).unwrap();
        assert_eq!(m.per_class[0].precision, 1.0);
        assert_eq!(m.per_class[1].precision, 0.5);
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.75);
        assert_eq!(m.per_class[0].f1, 2.0 / 3.0);
        assert_eq!(m.per_class[1].f1, 2.0 / 3.0);
        assert_eq!(m.f1, 2.0 / 3.0);
    }

    #[test]
    fn perfect_and_empty() {
        let cm = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
        let m = macro_metrics(&cm).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let empty = confusion(&[], &[], 2).unwrap();
        assert_eq!(empty.counts, vec![vec![0, 0], vec![0, 0]]);
        assert_eq!(accuracy(&empty), Err(EvalError::EmptyMatrix));
        assert!(macro_metrics(&empty).is_err());
    }

    #[test]
    fn absent_class_is_flagged_zero() {
        let cm = confusion(&[0, 1], &[0, 1], 3).unwrap();
        let m = macro_metrics(&cm).unwrap();
        let c = &m.per_class[2];
        assert_eq!((c.precision, c.recall, c.f1), (0.0, 0.0, 0.0));
        assert!(c.undefined);
        assert!(!m.per_class[0].undefined);
    }

    #[test]
    fn input_errors() {
        assert_eq!(
            confusion(&[0], &[0, 1], 2),
            Err(EvalError::LengthMismatch { truth: 1, predicted: 2 })
        );
        assert_eq!(
            confusion(&[0], &[2], 2),
            Err(EvalError::LabelOutOfRange { label: 2, classes: 2 })
        );
    }

    fn report(acc: f64) -> MetricsReport {
        MetricsReport {
            metrics: Metrics {
                accuracy: acc,
                macro_precision: acc,
                macro_recall: acc,
                macro_f1: acc,
            },
            confusion: ConfusionMatrix { counts: vec![] },
            per_class: vec![],
            undefined_ratios: false,
        }
    }

    #[test]
    fn aggregation() {
        let s = cv_aggregate(&[report(0.9), report(1.0)]).unwrap();
        assert!((s.mean.accuracy - 0.95).abs() < 1e-15);
        assert!((s.std.accuracy - 0.070711).abs() < 1e-6);
        let s = cv_aggregate(&vec![report(0.7); 5]).unwrap();
        assert_eq!(s.mean.accuracy, 0.7);
        assert_eq!(s.std.accuracy, 0.0);
        let s = cv_aggregate(&[report(0.3)]).unwrap();
        assert!(s.single_fold);
        assert_eq!(s.std.macro_f1, 0.0);
        assert_eq!(cv_aggregate(&[]), Err(EvalError::EmptyInput));
        let table = summary_table("MOGKAN", &cv_aggregate(&[report(0.9), report(1.0)]).unwrap());
        assert!(table.contains("0.9500 ± 0.0707"));
    }

    fn labels_strategy() -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
        (1usize..=6).prop_flat_map(|c| {
            (1usize..40).prop_flat_map(move |n| {
                (
                    Just(c),
                    proptest::collection::vec(0..c, n),
                    proptest::collection::vec(0..c, n),
                )
            })
        })
    }

    proptest! {
        #[test]
        fn relabeling_invariance((c, t, p) in labels_strategy(), seed in 0u64..100) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..c).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pt: Vec<usize> = t.iter().map(|&l| perm[l]).collect();
            let pp: Vec<usize> = p.iter().map(|&l| perm[l]).collect();
            let a = evaluate(&t, &p, c).unwrap().metrics;
            let b = evaluate(&pt, &pp, c).unwrap().metrics;
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
            prop_assert!((a.macro_precision - b.macro_precision).abs() < 1e-12);
            prop_assert!((a.macro_recall - b.macro_recall).abs() < 1e-12);
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        }

        #[test]
        fn accuracy_bounds((c, t, p) in labels_strategy()) {
            let cm = confusion(&t, &p, c).unwrap();
            let acc = accuracy(&cm).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert_eq!(acc == 1.0, t == p);
        }
    }
}
