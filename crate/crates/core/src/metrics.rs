//! Confusion matrices, macro precision/recall/F1 and expected calibration error.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 15;
/// Allowed deviation of a probability row sum from one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Contract("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            n,
            counts: rows.concat(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n.max(1)).map(<[u64]>::to_vec).collect()
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|p| self.get(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|t| self.get(t, c)).sum()
    }

    /// CSV with a header of class names; each row starts with the true class name.
    pub fn write_csv(&self, out: impl Write, class_names: &[String]) -> Result<()> {
        if class_names.len() != self.n {
            return Err(Error::Contract(format!(
                "{} class names for a {}-class matrix",
                class_names.len(),
                self.n
            )));
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true\\pred".to_string()];
        header.extend(class_names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in class_names.iter().zip(self.rows()) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<confusion csv>", e))?;
        Ok(())
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::Contract(format!(
                "class index out of range for {n_classes} classes (pred {p}, label {t})"
            )));
        }
        cm.counts[t * n_classes + p] += 1;
    }
    Ok(cm)
}

/// A ratio whose denominator was zero is reported as 0 with `undefined` set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ratio {
    pub value: f64,
    pub undefined: bool,
}

impl Ratio {
    fn of(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Ratio {
                value: 0.0,
                undefined: true,
            }
        } else {
            Ratio {
                value: num / den,
                undefined: false,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub precision: Ratio,
    pub recall: Ratio,
    pub f1: Ratio,
    pub support: u64,
    pub predicted: u64,
    /// False when the class has neither true samples nor predictions.
    pub in_macro: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prf1 {
    pub per_class: Vec<ClassScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

pub fn prf1(cm: &ConfusionMatrix) -> Result<Prf1> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("precision/recall need at least one sample".into()));
    }
    let mut per_class = Vec::with_capacity(cm.n);
    for c in 0..cm.n {
        let tp = cm.get(c, c) as f64;
        let support = cm.row_sum(c);
        let predicted = cm.col_sum(c);
        let precision = Ratio::of(tp, predicted as f64);
        let recall = Ratio::of(tp, support as f64);
        let f1 = Ratio::of(2.0 * precision.value * recall.value, precision.value + recall.value);
        per_class.push(ClassScores {
            precision,
            recall,
            f1,
            support,
            predicted,
            in_macro: support > 0 || predicted > 0,
        });
    }
    let counted: Vec<&ClassScores> = per_class.iter().filter(|s| s.in_macro).collect();
    let k = counted.len() as f64;
    let mean = |f: fn(&ClassScores) -> f64| counted.iter().map(|s| f(s)).sum::<f64>() / k;
    let trace: u64 = (0..cm.n).map(|c| cm.get(c, c)).sum();
    Ok(Prf1 {
        macro_precision: mean(|s| s.precision.value),
        macro_recall: mean(|s| s.recall.value),
        macro_f1: mean(|s| s.f1.value),
        accuracy: trace as f64 / total as f64,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    /// Zero for empty bins.
    pub mean_confidence: f64,
    /// Zero for empty bins.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityTable {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
}

impl ReliabilityTable {
    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin", "lower", "upper", "count", "mean_confidence", "accuracy"])?;
        for (i, b) in self.bins.iter().enumerate() {
            w.write_record([
                i.to_string(),
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
                b.mean_confidence.to_string(),
                b.accuracy.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<reliability csv>", e))?;
        Ok(())
    }
}

/// Bin of a confidence in `[0, 1]` over `bins` equal-width bins. Values on a
/// boundary fall into the lower bin; 0 belongs to the first bin.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let raw = (confidence * bins as f64).ceil() as isize - 1;
    raw.clamp(0, bins as isize - 1) as usize
}

/// Expected calibration error over max-probability confidences.
pub fn ece<T: Scalar>(probs: &Tensor<T>, labels: &[usize], bins: usize) -> Result<ReliabilityTable> {
    if bins == 0 {
        return Err(Error::Config("ECE needs at least one bin".into()));
    }
    let [b, n] = probs.shape()[..] else {
        return Err(Error::shape("ece", &[probs.shape()], "probabilities must be B×N"));
    };
    if labels.len() != b {
        return Err(Error::Contract(format!(
            "{b} probability rows for {} labels",
            labels.len()
        )));
    }
    let mut count = vec![0u64; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut correct = vec![0u64; bins];
    for (r, &label) in labels.iter().enumerate() {
        let row = probs.row(r);
        let sum: f64 = row.iter().map(|p| p.as_f64()).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|p| p.as_f64() < 0.0) {
            return Err(Error::Contract(format!(
                "row {r} is not a probability vector (sum {sum})"
            )));
        }
        if label >= n {
            return Err(Error::Contract(format!("label {label} out of range for {n} classes")));
        }
        let (pred, conf) = argmax(row);
        let k = bin_index(conf, bins);
        count[k] += 1;
        conf_sum[k] += conf;
        correct[k] += u64::from(pred == label);
    }
    let total = b as f64;
    let mut ece = 0.0;
    let table = (0..bins)
        .map(|k| {
            let (mean_confidence, accuracy) = if count[k] == 0 {
                (0.0, 0.0)
            } else {
                let c = count[k] as f64;
                (conf_sum[k] / c, correct[k] as f64 / c)
            };
            if count[k] > 0 {
                ece += count[k] as f64 / total * (accuracy - mean_confidence).abs();
            }
            ReliabilityBin {
                lower: k as f64 / bins as f64,
                upper: (k + 1) as f64 / bins as f64,
                count: count[k],
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(ReliabilityTable { bins: table, ece })
}

/// Index and value of the first maximum.
pub fn argmax<T: Scalar>(row: &[T]) -> (usize, f64) {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    (best, row[best].as_f64())
}

/// Flat evaluation summary serialized to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub ece: f64,
    pub loss: f64,
    pub samples: u64,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    /// Builds the report from predicted probabilities, labels and the mean loss.
    pub fn from_probs<T: Scalar>(probs: &Tensor<T>, labels: &[usize], loss: f64, bins: usize) -> Result<Self> {
        let n = *probs.shape().last().unwrap_or(&0);
        let preds: Vec<usize> = (0..labels.len()).map(|r| argmax(probs.row(r)).0).collect();
        let cm = confusion_matrix(&preds, labels, n)?;
        let scores = prf1(&cm)?;
        let rel = ece(probs, labels, bins)?;
        Ok(MetricsReport {
            accuracy: scores.accuracy,
            macro_precision: scores.macro_precision,
            macro_recall: scores.macro_recall,
            macro_f1: scores.macro_f1,
            ece: rel.ece,
            loss,
            samples: cm.total(),
            confusion: cm.rows(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
