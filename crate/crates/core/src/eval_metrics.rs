//! Accuracy, F1 and one-vs-rest AUC.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
    Weighted,
}

fn check_lengths(predictions: usize, truth: usize) -> Result<()> {
    if predictions != truth {
        return Err(Error::Metric(format!(
            "length mismatch: {predictions} predictions, {truth} labels"
        )));
    }
    if truth == 0 {
        return Err(Error::Metric("empty input".into()));
    }
    Ok(())
}

/// Index of the largest entry, ties to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(predictions.len(), truth.len())?;
    let hits = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `F1_c = 2TP / (2TP + FP + FN)`, 0 when the denominator is 0.
pub fn per_class_f1(
    predictions: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<Vec<f64>> {
    check_lengths(predictions.len(), truth.len())?;
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Metric(format!(
                "label out of range for {num_classes} classes"
            )));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    Ok((0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect())
}

pub fn macro_f1(predictions: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    f1_score(predictions, truth, num_classes, Averaging::Macro)
}

pub fn f1_score(
    predictions: &[usize],
    truth: &[usize],
    num_classes: usize,
    averaging: Averaging,
) -> Result<f64> {
    let per_class = per_class_f1(predictions, truth, num_classes)?;
    Ok(match averaging {
        Averaging::Macro => per_class.iter().sum::<f64>() / num_classes as f64,
        // Single-label micro F1 is plain accuracy.
        Averaging::Micro => accuracy(predictions, truth)?,
        Averaging::Weighted => {
            let mut support = vec![0usize; num_classes];
            truth.iter().for_each(|&t| support[t] += 1);
            per_class
                .iter()
                .zip(&support)
                .map(|(f, &s)| f * s as f64)
                .sum::<f64>()
                / truth.len() as f64
        }
    })
}

/// Exact AUC by pairwise counting, ties worth one half. `None` when either
/// side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(positive)
        .filter(|(_, &p)| !p)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut twice_wins: u64 = 0;
    for &a in &pos {
        for &b in &neg {
            twice_wins += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    Some(twice_wins as f64 / (2 * pos.len() * neg.len()) as f64)
}

/// One-vs-rest AUC per class (`None` where undefined).
pub fn per_class_auc(
    probabilities: &[Vec<f64>],
    truth: &[usize],
    num_classes: usize,
) -> Result<Vec<Option<f64>>> {
    check_lengths(probabilities.len(), truth.len())?;
    if probabilities.iter().any(|r| r.len() != num_classes) {
        return Err(Error::Metric(
            "probability row width differs from class count".into(),
        ));
    }
    Ok((0..num_classes)
        .map(|c| {
            let scores: Vec<f64> = probabilities.iter().map(|r| r[c]).collect();
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            binary_auc(&scores, &positive)
        })
        .collect())
}

/// Unweighted mean of the defined per-class one-vs-rest AUCs.
pub fn macro_ovr_auc(
    probabilities: &[Vec<f64>],
    truth: &[usize],
    num_classes: usize,
) -> Result<f64> {
    let defined: Vec<f64> = per_class_auc(probabilities, truth, num_classes)?
        .into_iter()
        .flatten()
        .collect();
    if defined.is_empty() {
        return Err(Error::Metric(
            "no class has both positives and negatives".into(),
        ));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
    pub per_class_f1: Vec<f64>,
    /// Per-class AUC; classes without both positives and negatives are `None`.
    pub per_class_auc: Vec<Option<f64>>,
    pub n_items: usize,
}

impl EvalReport {
    pub fn from_probabilities(
        probabilities: &[Vec<f64>],
        truth: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        let predictions: Vec<usize> = probabilities.iter().map(|r| argmax(r)).collect();
        let per_class_f1 = per_class_f1(&predictions, truth, num_classes)?;
        let per_class_auc = per_class_auc(probabilities, truth, num_classes)?;
        Ok(EvalReport {
            accuracy: accuracy(&predictions, truth)?,
            macro_f1: per_class_f1.iter().sum::<f64>() / num_classes as f64,
            macro_auc: macro_ovr_auc(probabilities, truth, num_classes)?,
            per_class_f1,
            per_class_auc,
            n_items: truth.len(),
        })
    }

    /// `key = value` lines with 6 decimal places.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n_items = {}", self.n_items);
        let _ = writeln!(out, "accuracy = {:.6}", self.accuracy);
        let _ = writeln!(out, "macro_f1 = {:.6}", self.macro_f1);
        let _ = writeln!(out, "macro_auc = {:.6}", self.macro_auc);
        let f1: Vec<String> = self
            .per_class_f1
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect();
        let _ = writeln!(out, "per_class_f1 = [{}]", f1.join(", "));
        let auc: Vec<String> = self
            .per_class_auc
            .iter()
            .map(|v| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}")))
            .collect();
        let _ = writeln!(out, "per_class_auc = [{}]", auc.join(", "));
        out
    }
}
