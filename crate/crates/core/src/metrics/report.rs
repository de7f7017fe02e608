use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{precision_recall, pr_curve, true_class, ConfusionMatrix, PrCurve};
use crate::data::{LabelVocabulary, Loader};
use crate::error::{Error, Result};
use crate::fusion::{predict, DualStageModel, Prediction};
use crate::tensor::{Element, Tensor};

/// Probability at or above which a label counts as predicted present.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelMetrics {
    pub name: String,
    /// Samples with this label present.
    pub support: u64,
    pub precision: f64,
    /// `None` when the label never occurs.
    pub recall: Option<f64>,
    /// Fraction of samples whose thresholded decision for this label is right.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub num_samples: usize,
    /// Samples with at least one positive label; the argmax metrics use these.
    pub labeled_samples: usize,
    /// Samples with no positive label, excluded from `accuracy`.
    pub no_finding_samples: usize,
    /// Samples with more than one positive label; their true class is the
    /// lowest-index one.
    pub multi_positive_samples: usize,
    /// Argmax accuracy, `trace / total` of the confusion matrix.
    pub accuracy: f64,
    /// Thresholded accuracy over all sample-label decisions.
    pub label_decision_accuracy: f64,
    pub decision_threshold: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub labels: Vec<LabelMetrics>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub curve: PrCurve,
    pub labels: Vec<String>,
}

/// Metrics from per-sample predictions and `[N, K]` binary targets.
pub fn evaluate_scores(
    prediction: &Prediction<f64>,
    targets: &Tensor<f64>,
    vocabulary: &LabelVocabulary,
    config_hash: &str,
) -> Result<Evaluation> {
    let k = vocabulary.len();
    let probs = &prediction.probabilities;
    if probs.shape() != targets.shape() || targets.shape().len() != 2 || targets.shape()[1] != k {
        return Err(Error::shape(
            "evaluate",
            format!("scores {:?}, targets {:?}, {k} labels", probs.shape(), targets.shape()),
        ));
    }
    let n = targets.shape()[0];
    if n == 0 {
        return Err(Error::EmptyInput("evaluate"));
    }
    if prediction.labels.len() != n {
        return Err(Error::shape("evaluate", format!("{} predicted labels for {n} samples", prediction.labels.len())));
    }
    if let Some(bad) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid("evaluate", format!("target {bad} is not 0 or 1")));
    }
    let hits: Vec<bool> = targets.data().iter().map(|&t| t == 1.0).collect();
    let rows: Vec<&[bool]> = hits.chunks(k).collect();

    let (mut predicted, mut truth) = (Vec::new(), Vec::new());
    for (row, &p) in rows.iter().zip(&prediction.labels) {
        if let Some(t) = true_class(row) {
            predicted.push(p);
            truth.push(t);
        }
    }
    // fails first when no label is ever present, so `truth` is non-empty below
    let curve = pr_curve(probs.data(), &hits)?;
    let confusion = ConfusionMatrix::new(&predicted, &truth, k)?;
    let accuracy = confusion.accuracy()?;

    let mut labels = Vec::with_capacity(k);
    let (mut tp_all, mut fp_all, mut fn_all, mut correct_all) = (0, 0, 0, 0);
    for c in 0..k {
        let (mut tp, mut fp, mut fn_, mut correct) = (0u64, 0u64, 0u64, 0u64);
        for (i, row) in rows.iter().enumerate() {
            let decided = probs.data()[i * k + c] >= DECISION_THRESHOLD;
            match (decided, row[c]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
            correct += u64::from(decided == row[c]);
        }
        let (precision, recall) = match precision_recall(tp, fp, fn_) {
            Ok((p, r)) => (p, Some(r)),
            Err(Error::UndefinedRecall) => (if tp + fp == 0 { 1.0 } else { 0.0 }, None),
            Err(e) => return Err(e),
        };
        labels.push(LabelMetrics {
            name: vocabulary.name(c).to_string(),
            support: tp + fn_,
            precision,
            recall,
            accuracy: correct as f64 / n as f64,
        });
        (tp_all, fp_all, fn_all, correct_all) = (tp_all + tp, fp_all + fp, fn_all + fn_, correct_all + correct);
    }
    let (micro_precision, micro_recall) = precision_recall(tp_all, fp_all, fn_all)?;
    let report = MetricsReport {
        num_samples: n,
        labeled_samples: truth.len(),
        no_finding_samples: n - truth.len(),
        multi_positive_samples: rows.iter().filter(|r| r.iter().filter(|&&t| t).count() > 1).count(),
        accuracy,
        label_decision_accuracy: correct_all as f64 / (n * k) as f64,
        decision_threshold: DECISION_THRESHOLD,
        micro_precision,
        micro_recall,
        labels,
        config_hash: config_hash.to_string(),
    };
    Ok(Evaluation { report, confusion, curve, labels: vocabulary.names().to_vec() })
}

/// Scores every sample of `loader` in file order, without augmentation.
pub fn evaluate<T: Element>(
    model: &DualStageModel<T>,
    loader: &Loader<'_>,
    batch_size: usize,
    vocabulary: &LabelVocabulary,
    config_hash: &str,
) -> Result<Evaluation> {
    if vocabulary.len() != model.num_labels() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} labels for a model with {} outputs", vocabulary.len(), model.num_labels()),
        ));
    }
    let (mut probs, mut targets, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for batch in loader.batches::<T>(batch_size, 0, 0, false)? {
        let batch = batch?;
        let logits = model.logits(&batch.images)?.cast::<f64>();
        let p = predict(&logits)?;
        probs.extend_from_slice(p.probabilities.data());
        labels.extend(p.labels);
        targets.extend(batch.targets.data().iter().map(|t| t.as_f64()));
    }
    let k = vocabulary.len();
    let n = labels.len();
    let prediction = Prediction { probabilities: Tensor::new(vec![n, k], probs)?, labels };
    evaluate_scores(&prediction, &Tensor::new(vec![n, k], targets)?, vocabulary, config_hash)
}

impl Evaluation {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.report).expect("report serializes");
        s.push('\n');
        s
    }

    /// Writes `metrics.json`, `confusion_matrix.csv`, `pr_curve.csv` and
    /// `pr_curve.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let title = format!("Micro-averaged precision-recall ({} labels)", self.labels.len());
        let files = [
            ("metrics.json", self.to_json()),
            ("confusion_matrix.csv", self.confusion.to_csv(&self.labels)?),
            ("pr_curve.csv", self.curve.to_csv()),
            ("pr_curve.svg", self.curve.to_svg(&title)),
        ];
        let mut written = Vec::new();
        for (name, contents) in files {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}
