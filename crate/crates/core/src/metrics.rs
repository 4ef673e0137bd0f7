//! Confusion matrix, per-class and macro precision/recall/F1, accuracy and
//! one-vs-rest ROC-AUC.

use serde::Serialize;

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument(
                "confusion matrix must be square".into(),
            ));
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn column_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

pub fn confusion_matrix(
    truth: &[usize],
    predicted: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::InvalidArgument(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(Error::InvalidArgument(format!(
                "label pair ({t}, {p}) out of range for {classes} classes"
            )));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// `trace / total`.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "accuracy of an empty confusion matrix".into(),
        ));
    }
    Ok(cm.trace() as f64 / total as f64)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub per_class: Vec<ClassScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Per-class scores and their unweighted (macro) means.
pub fn precision_recall_f1(cm: &ConfusionMatrix) -> Result<ClassMetrics> {
    let k = cm.classes();
    if k == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    let per_class: Vec<ClassScores> = (0..k)
        .map(|c| {
            let precision = ratio(cm.get(c, c), cm.column_sum(c));
            let recall = ratio(cm.get(c, c), cm.row_sum(c));
            ClassScores {
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: cm.row_sum(c),
            }
        })
        .collect();
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(ClassMetrics {
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        macro_f1: mean(|s| s.f1),
        accuracy: if cm.total() == 0 { 0.0 } else { accuracy(cm)? },
        per_class,
    })
}

/// Mann-Whitney AUC of `scores` for the positives; ties earn half credit.
/// `None` unless both classes are present.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // average 1-based ranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&s| positive[s]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUC per class from probability rows `(N, K)`.
pub fn roc_auc_ovr(
    probs: &[Vec<f64>],
    truth: &[usize],
    classes: usize,
) -> Result<Vec<Option<f64>>> {
    if probs.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} probability rows but {} labels",
            probs.len(),
            truth.len()
        )));
    }
    if probs.iter().any(|r| r.len() != classes) || truth.iter().any(|&t| t >= classes) {
        return Err(Error::InvalidArgument(format!(
            "rows and labels must cover {classes} classes"
        )));
    }
    Ok((0..classes)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            binary_auc(&scores, &positive)
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassReport {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MacroReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// The serialized evaluation report.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub confusion_matrix: Vec<Vec<u64>>,
    pub per_class: Vec<ClassReport>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroReport,
}

impl MetricsReport {
    pub fn build(probs: &[Vec<f64>], truth: &[usize], class_names: &[String]) -> Result<Self> {
        let k = class_names.len();
        let predicted: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
        let cm = confusion_matrix(truth, &predicted, k)?;
        let scores = precision_recall_f1(&cm)?;
        let aucs = roc_auc_ovr(probs, truth, k)?;
        Ok(Self {
            accuracy: accuracy(&cm)?,
            confusion_matrix: cm.counts,
            per_class: class_names
                .iter()
                .zip(scores.per_class.iter().zip(aucs))
                .map(|(name, (s, auc))| ClassReport {
                    name: name.clone(),
                    precision: s.precision,
                    recall: s.recall,
                    f1: s.f1,
                    support: s.support,
                    auc,
                })
                .collect(),
            macro_avg: MacroReport {
                precision: scores.macro_precision,
                recall: scores.macro_recall,
                f1: scores.macro_f1,
            },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Round half away from zero to `places` decimals.
pub fn round_half_up(x: f64, places: i32) -> f64 {
    let s = 10f64.powi(places);
    (x * s + 1e-9 * x.signum()).round() / s
}
