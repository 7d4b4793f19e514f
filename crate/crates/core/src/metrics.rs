//! Multi-label evaluation: average precision, mAP and thresholded
//! overall/per-class precision, recall and F1.

use std::fmt::{self, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ops::sigmoid_scalar;

/// Average precision over precision-at-positive-ranks.
///
/// Scores are ranked in descending order with ties kept in original index
/// order. Returns `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Scores `[N, C]` with binary labels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub num_samples: usize,
    pub class_names: Vec<String>,
}

impl PredictionSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>, class_names: Vec<String>) -> Result<Self> {
        let c = class_names.len();
        if c == 0 || scores.len() % c != 0 || scores.len() != labels.len() {
            return Err(Error::data(format!(
                "{} scores and {} labels do not form an [N, {c}] matrix",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::data("labels must be 0 or 1"));
        }
        Ok(Self {
            num_samples: scores.len() / c,
            scores,
            labels,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_scores(&self, class: usize) -> Vec<f64> {
        let c = self.num_classes();
        (0..self.num_samples).map(|n| self.scores[n * c + class]).collect()
    }

    pub fn class_labels(&self, class: usize) -> Vec<u8> {
        let c = self.num_classes();
        (0..self.num_samples).map(|n| self.labels[n * c + class]).collect()
    }

    /// Per-class AP, `None` for classes without positives.
    pub fn per_class_ap(&self) -> Vec<Option<f64>> {
        (0..self.num_classes())
            .map(|c| average_precision(&self.class_scores(c), &self.class_labels(c)))
            .collect()
    }
}

/// Mean of the defined per-class APs. Classes without positives are skipped
/// with a warning on stderr.
pub fn mean_average_precision(pred: &PredictionSet) -> Result<f64> {
    let aps = pred.per_class_ap();
    for (name, ap) in pred.class_names.iter().zip(&aps) {
        if ap.is_none() {
            eprintln!("warning: class {name:?} has no positives and is excluded from mAP");
        }
    }
    mean_defined(&aps).ok_or_else(|| Error::data("no class has a positive label; mAP is undefined"))
}

fn mean_defined(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// True/false positive and false negative counts at a threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Scores are logits; a label is predicted when `sigmoid(score) ≥ threshold`.
fn class_counts(pred: &PredictionSet, threshold: f64) -> Vec<Counts> {
    let c = pred.num_classes();
    let mut counts = vec![Counts::default(); c];
    for (i, (&s, &l)) in pred.scores.iter().zip(&pred.labels).enumerate() {
        let predicted = sigmoid_scalar(s) >= threshold;
        let k = &mut counts[i % c];
        match (predicted, l == 1) {
            (true, true) => k.tp += 1,
            (true, false) => k.fp += 1,
            (false, true) => k.fn_ += 1,
            (false, false) => {}
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverallMetrics {
    pub op: f64,
    pub or: f64,
    pub of1: f64,
}

/// Overall precision, recall and F1 pooled across classes.
pub fn overall_metrics(pred: &PredictionSet, threshold: f64) -> OverallMetrics {
    let total = class_counts(pred, threshold)
        .into_iter()
        .fold(Counts::default(), |a, k| Counts {
            tp: a.tp + k.tp,
            fp: a.fp + k.fp,
            fn_: a.fn_ + k.fn_,
        });
    if total.tp + total.fp == 0 {
        eprintln!("warning: no positive predictions; overall precision set to 0");
    }
    if total.tp + total.fn_ == 0 {
        eprintln!("warning: no positive labels; overall recall set to 0");
    }
    let (op, or) = (total.precision(), total.recall());
    OverallMetrics { op, or, of1: f1(op, or) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRow {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassRow>,
    pub map: Option<f64>,
    pub overall: OverallMetrics,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-class thresholded metrics plus AP, mAP and the overall triple.
pub fn per_class_report(pred: &PredictionSet, threshold: f64) -> EvalReport {
    let aps = pred.per_class_ap();
    let classes = class_counts(pred, threshold)
        .into_iter()
        .zip(&pred.class_names)
        .zip(&aps)
        .map(|((k, name), &ap)| {
            let (p, r) = (k.precision(), k.recall());
            ClassRow {
                name: name.clone(),
                precision: p,
                recall: r,
                f1: f1(p, r),
                ap,
            }
        })
        .collect();
    EvalReport {
        classes,
        map: mean_defined(&aps),
        overall: overall_metrics(pred, threshold),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,ap\n");
        for row in &self.classes {
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{:.4},{}",
                row.name,
                row.precision,
                row.recall,
                row.f1,
                cell(row.ap)
            );
        }
        let _ = writeln!(out, "mAP,,,,{}", cell(self.map));
        let o = &self.overall;
        let _ = writeln!(out, "OP/OR/OF1,{:.4},{:.4},{:.4},", o.op, o.or, o.of1);
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .classes
            .iter()
            .map(|r| r.name.len())
            .chain([9])
            .max()
            .unwrap_or(9);
        writeln!(
            f,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}",
            "class", "precision", "recall", "f1", "ap"
        )?;
        for r in &self.classes {
            writeln!(
                f,
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9}",
                r.name,
                r.precision,
                r.recall,
                r.f1,
                r.ap.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
            )?;
        }
        writeln!(f, "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}", "mAP", "", "", "", cell(self.map))?;
        let o = &self.overall;
        writeln!(
            f,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}",
            "OP/OR/OF1", o.op, o.or, o.of1
        )
    }
}
