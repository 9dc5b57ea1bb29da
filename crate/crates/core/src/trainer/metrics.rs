use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Support-weighted classification metrics for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub per_class_support: Vec<usize>,
    /// `confusion_matrix[true][predicted]`.
    pub confusion_matrix: Vec<Vec<usize>>,
    pub run_seed: u64,
    pub config: Option<ModelConfig>,
}

impl MetricsReport {
    /// Metrics from a square confusion matrix. A class nobody predicted has
    /// precision 0; a class with no support has zero weight.
    pub fn from_confusion(confusion_matrix: Vec<Vec<usize>>) -> Result<Self> {
        let k = confusion_matrix.len();
        if k == 0 || confusion_matrix.iter().any(|r| r.len() != k) {
            return Err(Error::Data("confusion matrix must be square and non-empty".into()));
        }
        let support: Vec<usize> = confusion_matrix.iter().map(|r| r.iter().sum()).collect();
        let total: usize = support.iter().sum();
        if total == 0 {
            return Err(Error::Data("no samples to score".into()));
        }
        let (mut precision, mut recall, mut f1, mut correct) = (0.0, 0.0, 0.0, 0);
        for c in 0..k {
            let tp = confusion_matrix[c][c];
            correct += tp;
            let predicted: usize = confusion_matrix.iter().map(|r| r[c]).sum();
            let p = if predicted == 0 {
                0.0
            } else {
                tp as f64 / predicted as f64
            };
            let r = if support[c] == 0 {
                0.0
            } else {
                tp as f64 / support[c] as f64
            };
            let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            let w = support[c] as f64 / total as f64;
            precision += w * p;
            recall += w * r;
            f1 += w * f;
        }
        Ok(Self {
            precision,
            recall,
            weighted_f1: f1,
            accuracy: correct as f64 / total as f64,
            per_class_support: support,
            confusion_matrix,
            run_seed: 0,
            config: None,
        })
    }
}

/// Weighted precision, recall and F1 of `predictions` against `labels`.
pub fn weighted_metrics(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "need equal, non-zero numbers of predictions and labels, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let mut matrix = vec![vec![0; num_classes]; num_classes];
    for (i, (&p, &t)) in predictions.iter().zip(labels).enumerate() {
        for label in [p, t] {
            if label >= num_classes {
                return Err(Error::Label {
                    index: i,
                    label,
                    classes: num_classes,
                });
            }
        }
        matrix[t][p] += 1;
    }
    MetricsReport::from_confusion(matrix)
}
