//! Multiclass evaluation: confusion matrix, per-label one-vs-rest panel,
//! macro AUC and macro F1.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{invalid, Error, Result};

/// Counts with rows = true class and columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|r| r.len() != c) {
            return Err(invalid("confusion matrix must be square and non-empty"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, r: usize) -> u64 {
        self.counts[r].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total() as f64
    }

    pub fn write_csv(&self, class_names: &[String], path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["true\\pred".to_string()];
        header.extend(class_names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in class_names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (i, (&p, &l)) in preds.iter().zip(labels).enumerate() {
        for v in [p, l] {
            if v >= classes {
                return Err(Error::LabelOutOfRange {
                    index: i,
                    label: v,
                    classes,
                });
            }
        }
        counts[l][p] += 1;
    }
    ConfusionMatrix::from_counts(counts)
}

/// One label treated as a binary positive class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPanel {
    pub label: usize,
    pub acc: f64,
    pub er: f64,
    pub recall: f64,
    pub specificity: f64,
    pub fall_out: f64,
    pub miss_rate: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPanel {
    pub labels: Vec<LabelPanel>,
    pub accuracy: f64,
    pub macro_auc: Option<f64>,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

/// `num / den`, with `0 / 0` read as `empty`.
fn rate(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

/// Per-label one-vs-rest rates. When a label has no positives its recall is
/// taken as 0 (miss rate 1); with no negatives its specificity is 1.
pub fn panel_from_matrix(m: &ConfusionMatrix) -> Result<Vec<LabelPanel>> {
    let total = m.total();
    (0..m.classes())
        .map(|l| {
            let tp = m.counts[l][l];
            let pos = m.row_sum(l);
            let predicted = m.col_sum(l);
            let neg = total - pos;
            if pos == 0 && neg == 0 {
                return Err(invalid(format!("label {l} has neither positives nor negatives")));
            }
            let fn_ = pos - tp;
            let fp = predicted - tp;
            let tn = total - tp - fn_ - fp;
            let recall = rate(tp, pos, 0.0);
            let specificity = rate(tn, neg, 1.0);
            let acc = rate(tp + tn, total, 0.0);
            let precision = rate(tp, predicted, 0.0);
            Ok(LabelPanel {
                label: l,
                acc,
                er: 1.0 - acc,
                recall,
                specificity,
                fall_out: 1.0 - specificity,
                miss_rate: 1.0 - recall,
                precision,
                f1: f1(tp, fp, fn_),
            })
        })
        .collect()
}

/// `2 TP / (2 TP + FP + FN)`; 0 when the class never occurs nor is predicted.
fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    rate(2 * tp, 2 * tp + fp + fn_, 0.0)
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(m: &ConfusionMatrix) -> f64 {
    let c = m.classes();
    let sum: f64 = (0..c)
        .map(|l| {
            let tp = m.counts[l][l];
            f1(tp, m.col_sum(l) - tp, m.row_sum(l) - tp)
        })
        .sum();
    sum / c as f64
}

/// Mann-Whitney AUC of `scores` for the `positive` flags, ties counting
/// one half. `None` without both classes present.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank of the tie block
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let r_pos: f64 = ranks.iter().zip(positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let np = n_pos as f64;
    Some((r_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub macro_auc: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    /// Classes left out of the average for lacking positives or negatives.
    pub excluded: Vec<usize>,
}

/// Macro one-vs-rest AUC over `scores` (`(n, classes)`).
pub fn roc_auc_ovr(scores: &Tensor, labels: &[usize]) -> Result<AucReport> {
    if scores.shape().len() != 2 || scores.rows() != labels.len() {
        return Err(invalid(format!(
            "scores of shape {:?} for {} labels",
            scores.shape(),
            labels.len()
        )));
    }
    let c = scores.row_len();
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(Error::LabelOutOfRange {
            index: i,
            label: l,
            classes: c,
        });
    }
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let s: Vec<f64> = (0..labels.len()).map(|i| scores.row(i)[k]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            auc_binary(&s, &pos)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(AucReport {
        macro_auc: if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        },
        excluded: (0..c).filter(|&k| per_class[k].is_none()).collect(),
        per_class,
    })
}

/// Full panel from predictions and class probabilities.
pub fn evaluate(probs: &Tensor, preds: &[usize], labels: &[usize], classes: usize) -> Result<MetricPanel> {
    let m = confusion_matrix(preds, labels, classes)?;
    Ok(MetricPanel {
        labels: panel_from_matrix(&m)?,
        accuracy: m.accuracy(),
        macro_auc: roc_auc_ovr(probs, labels)?.macro_auc,
        macro_f1: macro_f1(&m),
        confusion: m,
    })
}

impl MetricPanel {
    /// One row per label: `label,ACC,ER,Recall,Specificity,FallOut,MissRate`.
    pub fn write_csv(&self, class_names: &[String], path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["label", "ACC", "ER", "Recall", "Specificity", "FallOut", "MissRate"])?;
        for p in &self.labels {
            let name = class_names.get(p.label).cloned().unwrap_or_else(|| p.label.to_string());
            let vals = [p.acc, p.er, p.recall, p.specificity, p.fall_out, p.miss_rate];
            let mut rec = vec![name];
            rec.extend(vals.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
