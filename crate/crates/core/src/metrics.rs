//! Confusion matrix, per-class recall / precision / F1 and accuracy, as exact
//! rationals rounded half-to-even to two decimals.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::data::{AugmentPolicy, BatchOptions, DataError, Dataset, NormalizationStats, Split};
use crate::nn::{Model, ModelError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("value {value} at position {index} is outside 0..{classes}")]
    OutOfRange { index: usize, value: usize, classes: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("empty test split")]
    EmptyTestSplit,
    #[error("confusion matrix must be square with one row per class")]
    NotSquare,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let k = classes.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(MetricsError::NotSquare);
        }
        Ok(Self { classes, counts })
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: &[String]) -> Result<ConfusionMatrix, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    let k = classes.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (index, (&p, &t)) in predictions.iter().zip(labels).enumerate() {
        for value in [p, t] {
            if value >= k {
                return Err(MetricsError::OutOfRange { index, value, classes: k });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { classes: classes.to_vec(), counts })
}

/// A percentage, or undefined when its denominator is empty. Serializes as
/// a number or the string `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    Undefined,
}

impl Metric {
    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::Undefined => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v:.2}"),
            Metric::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Metric::Value(v) => s.serialize_f64(*v),
            Metric::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Metric::Value(v)),
            Raw::Text(s) if s == "undefined" => Ok(Metric::Undefined),
            Raw::Text(s) => Err(serde::de::Error::custom(format!("expected a number or \"undefined\", got {s:?}"))),
        }
    }
}

/// `100·num/den` rounded half-to-even at two decimals, using integer
/// arithmetic only.
pub fn percent(num: u64, den: u64) -> Metric {
    if den == 0 {
        return Metric::Undefined;
    }
    let scaled = num as u128 * 10_000;
    let (den, mut q) = (den as u128, scaled / den as u128);
    let twice_rem = 2 * (scaled % den);
    if twice_rem > den || (twice_rem == den && q % 2 == 1) {
        q += 1;
    }
    Metric::Value(q as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub recall: Metric,
    pub ppv: Metric,
    pub f1: Metric,
}

/// Recall `tp/row`, precision `tp/col`, and F1 as the exact rational
/// `2tp / (row + col)`, which equals `2PR/(P+R)` whenever both are defined.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.k())
        .map(|k| {
            let tp = cm.counts[k][k];
            let (row, col) = (cm.row_sum(k), cm.col_sum(k));
            let f1 = if row == 0 || col == 0 { Metric::Undefined } else { percent(2 * tp, row + col) };
            ClassMetrics { recall: percent(tp, row), ppv: percent(tp, col), f1 }
        })
        .collect()
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    match percent(cm.trace(), cm.total()) {
        Metric::Value(v) => Ok(v),
        Metric::Undefined => Err(MetricsError::Empty),
    }
}

/// Index of the largest value in each row; ties go to the lowest index.
pub fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub recall: Vec<Metric>,
    pub ppv: Vec<Metric>,
    pub f1: Vec<Metric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    pub per_class: PerClass,
    pub accuracy: f64,
    pub n: u64,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self, MetricsError> {
        let accuracy = accuracy(cm)?;
        let m = per_class_metrics(cm);
        Ok(Self {
            classes: cm.classes.clone(),
            confusion: cm.counts.clone(),
            per_class: PerClass {
                recall: m.iter().map(|c| c.recall).collect(),
                ppv: m.iter().map(|c| c.ppv).collect(),
                f1: m.iter().map(|c| c.f1).collect(),
            },
            accuracy,
            n: cm.total(),
        })
    }

    /// Plain-text tables: one per metric with the class names as columns,
    /// then accuracy and the confusion matrix.
    pub fn table(&self) -> String {
        let width = self.classes.iter().map(String::len).max().unwrap_or(0).max(9);
        let row = |cells: Vec<String>| cells.iter().map(|c| format!("{c:>width$}")).collect::<Vec<_>>().join("  ");
        let mut out = String::new();
        for (title, values) in [
            ("Recall (Sensitivity) %", &self.per_class.recall),
            ("Positive Predictive Value (Precision) %", &self.per_class.ppv),
            ("F-1 score %", &self.per_class.f1),
        ] {
            out += &format!("{title}\n{}\n{}\n\n", row(self.classes.clone()), row(values.iter().map(|m| m.to_string()).collect()));
        }
        out += &format!("Accuracy %: {:.2} ({} samples)\n\nConfusion (rows true, columns predicted)\n", self.accuracy, self.n);
        out += &format!("{:>width$}  {}\n", "", row(self.classes.clone()));
        for (name, counts) in self.classes.iter().zip(&self.confusion) {
            out += &format!("{name:>width$}  {}\n", row(counts.iter().map(u64::to_string).collect()));
        }
        out
    }
}

/// Ordered, unaugmented pass over the test split in eval mode.
pub fn evaluate(
    model: &Model,
    data: &mut Dataset,
    size: usize,
    batch_size: usize,
    stats: &NormalizationStats,
) -> Result<EvalReport, MetricsError> {
    if data.len(Split::Test) == 0 {
        return Err(MetricsError::EmptyTestSplit);
    }
    let opts = BatchOptions { size, batch_size, seed: 0, augment: AugmentPolicy::none(), stats: stats.clone() };
    let classes = data.manifest().class_names.clone();
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    for batch in data.batches(Split::Test, &opts)? {
        let batch = batch?;
        let logits = model.predict(&batch.images)?;
        preds.extend(argmax_rows(logits.data(), model.n_classes()));
        labels.extend(batch.labels);
    }
    EvalReport::from_confusion(&confusion_matrix(&preds, &labels, &classes)?)
}
