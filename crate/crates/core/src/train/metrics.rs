//! Confusion-matrix metrics and the score-to-binary evaluation protocol.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, TensorError};

/// Prediction-count matrix indexed `counts[truth][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Confusion {
        Confusion {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<usize>>) -> Result<Confusion> {
        let classes = counts.len();
        if classes == 0 || counts.iter().any(|row| row.len() != classes) {
            return Err(TensorError::InvalidArg {
                op: "confusion",
                msg: "counts must form a non-empty square matrix".into(),
            });
        }
        Ok(Confusion { classes, counts })
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> usize {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> usize {
        self.counts.iter().map(|row| row[class]).sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.classes).map(|c| self.counts[c][c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total() as f64
    }

    /// None when the class has no true samples.
    pub fn recall(&self, class: usize) -> Option<f64> {
        match self.support(class) {
            0 => None,
            n => Some(self.counts[class][class] as f64 / n as f64),
        }
    }

    /// None when the class is never predicted.
    pub fn precision(&self, class: usize) -> Option<f64> {
        match self.predicted(class) {
            0 => None,
            n => Some(self.counts[class][class] as f64 / n as f64),
        }
    }

    /// Harmonic mean of precision and recall; 0 when their sum is 0, None
    /// when the class appears in neither truth nor prediction.
    pub fn f1(&self, class: usize) -> Option<f64> {
        match (self.precision(class), self.recall(class)) {
            (None, None) => None,
            (p, r) => {
                let (p, r) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
                if p + r == 0.0 {
                    Some(0.0)
                } else {
                    Some(2.0 * p * r / (p + r))
                }
            }
        }
    }

    /// Mean recall over classes with support; the UA convention.
    pub fn macro_recall(&self) -> f64 {
        let recalls: Vec<f64> = (0..self.classes).filter_map(|c| self.recall(c)).collect();
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

/// Evaluation summary. `acc` and `wa` are the overall correct rate, `ua` is
/// macro-averaged recall, and `f1` is the positive-class score on binary
/// tasks. `n_eval` counts scored samples after any exclusions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_eval: usize,
    pub acc: f64,
    pub f1: Option<f64>,
    pub wa: f64,
    pub ua: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
}

impl MetricReport {
    /// Metrics are pure functions of the confusion matrix.
    pub fn from_confusion(conf: &Confusion, binary_f1: bool) -> MetricReport {
        let acc = conf.accuracy();
        MetricReport {
            n_eval: conf.total(),
            acc,
            f1: if binary_f1 { conf.f1(1) } else { None },
            wa: acc,
            ua: conf.macro_recall(),
            per_class_recall: (0..conf.classes).map(|c| conf.recall(c)).collect(),
            confusion: conf.counts.clone(),
        }
    }

    /// The model-selection scalar: ACC on binary tasks, WA on multiclass.
    pub fn selection_score(&self) -> f64 {
        match self.f1 {
            Some(_) => self.acc,
            None => self.wa,
        }
    }
}

/// Score pairs to a 2×2 confusion under the sign protocol: positive means
/// score > 0, zero-scored truths are excluded, and a prediction of exactly
/// 0 counts as negative. Returns the matrix and the exclusion count.
pub fn binary_confusion_from_scores(pairs: &[(f64, f64)]) -> (Confusion, usize) {
    let mut conf = Confusion::new(2);
    let mut excluded = 0;
    for &(pred, truth) in pairs {
        if truth == 0.0 {
            excluded += 1;
            continue;
        }
        conf.add(usize::from(truth > 0.0), usize::from(pred > 0.0));
    }
    (conf, excluded)
}
