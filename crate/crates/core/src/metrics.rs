//! ICBHI 2017 challenge evaluation.
//!
//! Multi-label predictions are folded back onto the four cycle classes,
//! counted in a 4x4 confusion matrix, and summarized as specificity
//! (Normal recall), sensitivity (exact-class recall over the three
//! abnormal classes) and their mean, the ICBHI score.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{CycleClass, LabelVector};
use crate::error::{Error, Result};

/// `counts[true][pred]` in class order Normal, Crackle, Wheeze, Both.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix4 {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionMatrix4 {
    pub fn record(&mut self, truth: CycleClass, predicted: CycleClass) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, class: CycleClass) -> u64 {
        self.counts[class.index()].iter().sum()
    }

    pub fn correct(&self, class: CycleClass) -> u64 {
        self.counts[class.index()][class.index()]
    }
}

/// Builds the confusion matrix from paired label vectors.
pub fn confusion(truth: &[LabelVector], predicted: &[LabelVector]) -> Result<ConfusionMatrix4> {
    if truth.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} true labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix4::default();
    for (t, p) in truth.iter().zip(predicted) {
        cm.record(t.class(), p.class());
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Normal recall. `None` when there are no Normal cycles.
    pub specificity: Option<f64>,
    /// Exact-class recall over Crackle, Wheeze and Both. `None` when there
    /// are no abnormal cycles.
    pub sensitivity: Option<f64>,
    /// `(Sp + Se) / 2`, withheld when either term is undefined.
    pub score: Option<f64>,
    /// Supplementary: abnormal cycles predicted as any abnormal class.
    /// Never enters the score.
    pub binary_sensitivity: Option<f64>,
    pub recall: [Option<f64>; 4],
    pub confusion: ConfusionMatrix4,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn icbhi_metrics(cm: &ConfusionMatrix4) -> Result<MetricsReport> {
    if cm.total() == 0 {
        return Err(Error::Validation("empty confusion matrix".into()));
    }
    let abnormal = [CycleClass::Crackle, CycleClass::Wheeze, CycleClass::Both];
    let specificity = ratio(cm.correct(CycleClass::Normal), cm.row_sum(CycleClass::Normal));
    let abnormal_total: u64 = abnormal.iter().map(|&c| cm.row_sum(c)).sum();
    let abnormal_correct: u64 = abnormal.iter().map(|&c| cm.correct(c)).sum();
    let sensitivity = ratio(abnormal_correct, abnormal_total);
    let detected: u64 = abnormal
        .iter()
        .flat_map(|&t| abnormal.iter().map(move |&p| cm.counts[t.index()][p.index()]))
        .sum();
    let score = match (specificity, sensitivity) {
        (Some(sp), Some(se)) => Some(score_from(sp, se)),
        _ => None,
    };
    let recall = CycleClass::ALL.map(|c| ratio(cm.correct(c), cm.row_sum(c)));
    Ok(MetricsReport {
        specificity,
        sensitivity,
        score,
        binary_sensitivity: ratio(detected, abnormal_total),
        recall,
        confusion: *cm,
    })
}

/// ICBHI score from specificity and sensitivity.
pub fn score_from(specificity: f64, sensitivity: f64) -> f64 {
    (specificity + sensitivity) / 2.0
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.4}"))
}

impl MetricsReport {
    /// Flat `key=value` document; values at 4 decimals, `nan` when undefined.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "cycles={}", self.confusion.total());
        let _ = writeln!(out, "specificity={}", fmt4(self.specificity));
        let _ = writeln!(out, "sensitivity={}", fmt4(self.sensitivity));
        let _ = writeln!(out, "score={}", fmt4(self.score));
        let _ = writeln!(out, "binary_sensitivity={}", fmt4(self.binary_sensitivity));
        for (class, r) in CycleClass::ALL.iter().zip(self.recall) {
            let _ = writeln!(out, "recall.{}={}", class.key(), fmt4(r));
        }
        for t in CycleClass::ALL {
            for p in CycleClass::ALL {
                let _ = writeln!(
                    out,
                    "confusion.{}.{}={}",
                    t.key(),
                    p.key(),
                    self.confusion.counts[t.index()][p.index()]
                );
            }
        }
        out
    }
}
